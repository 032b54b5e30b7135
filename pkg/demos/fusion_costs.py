# %% Per-operator vs fused fake-quant on one frame of the toy front-end
import time

import numpy as np

from quantfuse.engine import ArenaAllocator, ExecutionPlan, run_frontend, trace_report
from quantfuse.frontend import build_toy_patchifier, calibration_image, inject_qat

model = inject_qat(build_toy_patchifier(7))
img = calibration_image(0, (3, 128, 128))

# %% Same outputs, different cost
outs = {}
for mode in ("peroperator", "fused"):
    f, i, trace = run_frontend(ExecutionPlan(mode=mode), model, img)
    outs[mode] = f.data
    print(mode, trace_report(trace))
print("bit-identical:", np.array_equal(outs["peroperator"], outs["fused"]))

# %% Sweep labels for the first layer
_, _, trace = run_frontend(ExecutionPlan(mode="peroperator"), model, img)
print(trace.per_layer[0].sweeps)

# %% Wall clock, interleaved
times = {"peroperator": [], "fused": []}
arenas = {m: ArenaAllocator() for m in times}
for _ in range(20):
    for mode in times:
        t = time.perf_counter()
        run_frontend(ExecutionPlan(mode=mode), model, img, arenas[mode])
        times[mode].append(time.perf_counter() - t)
for mode, ts in times.items():
    print(f"{mode:12s} median {1e3 * np.median(ts):.2f} ms, reserved {arenas[mode].peak_reserved >> 20} MiB")

# %% A fault in the fused kernels falls back to the per-operator path
f, _, trace = run_frontend(ExecutionPlan(mode="fused", inject_fault=True), model, img)
print("fell back:", trace.fell_back, "same output:", np.array_equal(f.data, outs["peroperator"]))
