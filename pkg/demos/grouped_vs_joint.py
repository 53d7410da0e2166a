"""Compare the joint and the grouped LMB filter on the three-object TBD scenario.

A reduced run count keeps this under a minute. Pass a number to change it:
``python demos/grouped_vs_joint.py 5``.
"""
import sys

from lmbgom.harness import bundled_scenario, run_experiment, with_overrides

runs = int(sys.argv[1]) if len(sys.argv) > 1 else 2
base = with_overrides(bundled_scenario("tbd_3obj"), runs=runs)

for name in ("lmb-gom", "g-lmb-gom"):
    res = run_experiment(with_overrides(base, filter=name))
    line = f"{name:10s} OSPA {res.post_transient_ospa():6.3f} m   {res.mean_frame_ms().mean():7.1f} ms/frame"
    if name == "g-lmb-gom":
        line += f"   {res.summary()['mean_groups']:.2f} groups/frame"
    print(line)
