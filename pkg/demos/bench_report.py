# %% A small benchmark triad and its report tables
import tempfile
from pathlib import Path

from quantfuse.bench import BenchConfig, results_to_markdown, run_bench
from quantfuse.distill import save_scales
from quantfuse.frontend import build_toy_patchifier, inject_qat

tmp = Path(tempfile.mkdtemp())
save_scales(tmp / "scales.qscl", inject_qat(build_toy_patchifier(7)).scales())

cfg = BenchConfig(scenes=["orbit:1:20", "random-walk:1:20"], warmup_frames=3, scales=str(tmp / "scales.qscl"))
results = run_bench(cfg)

# %% Absolute numbers plus deltas against the float baseline
print(results_to_markdown(results))
