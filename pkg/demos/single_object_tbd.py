"""Track one dim object through simulated pixel frames with the low-level API.

Run with ``python demos/single_object_tbd.py``.
"""
import numpy as np

from lmbgom import BirthModel, FilterConfig, Label, LmbDensity, MotionModel, PixelGrid, RandomStream, TbdModel, lmb_gom_step
from lmbgom.filters import gaussian_track

stream = RandomStream(7)
sensor = TbdModel.from_snr(PixelGrid(30, 30), 15.0)
motion = MotionModel.constant_velocity(dt=1.0, sigma_v=0.05, survival=0.99)
cfg = FilterConfig(n_particles=2000)

truth = np.array([5.0, 6.0, 0.6, 0.5])
start = gaussian_track(truth, np.diag([0.5, 0.5, 0.02, 0.02]), 0.9, cfg.n_particles, stream.child("init").generator())
state = LmbDensity({Label(0, 1): start})

print(f"noise variance for 15 dB: {sensor.noise_var:.4f}")
print(" k   true x  true y   est x   est y  existence")
for k in range(1, 21):
    truth = motion.F @ truth
    frame = sensor.sample_frame(truth[None, :], stream.child("frame", k).generator(), step=k)
    state = lmb_gom_step(state, BirthModel(), motion, sensor, frame, cfg, stream.child("filter", k), step=k)
    track = state.tracks[Label(0, 1)]
    m = track.mean()
    print(f"{k:2d}  {truth[0]:7.2f} {truth[1]:7.2f} {m[0]:7.2f} {m[1]:7.2f}  {track.existence:9.3f}")
