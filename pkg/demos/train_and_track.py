# %% Learn INT8 scales against the float model, then track a synthetic scene
from quantfuse.distill import DistillConfig, evaluate_loss, frames_from_source, train_scales
from quantfuse.engine import ExecutionPlan
from quantfuse.frontend import build_toy_patchifier, inject_qat
from quantfuse.geometry import generate_scene, render_frames, run_pipeline
from quantfuse.quant import QuantConfig, multiply_scales

teacher = build_toy_patchifier(7)
student = inject_qat(teacher)  # max-abs scales from a calibration image
cfg = DistillConfig(steps=60)
frames = frames_from_source(cfg.source, cfg.frame_size)

# %% Only the log scales move; the conv weights are frozen
state, scales = train_scales(student, teacher, frames, cfg)
print(len(state.param_names), "trainable scalars, e.g.", state.param_names[:2])
print("loss before", evaluate_loss(student, teacher, frames))
print("loss after ", evaluate_loss(inject_qat(teacher, QuantConfig(), scales), teacher, frames))
print("weights unchanged:", student.weight_hash() == teacher.weight_hash())

# %% Float baseline, trained INT8 scales, and badly inflated scales
scene = generate_scene(2, 40, "orbit")
rendered = render_frames(scene)
for label, sc in (("float", None), ("int8", scales), ("x100", multiply_scales(scales, 100.0, QuantConfig()))):
    res = run_pipeline(teacher, sc, ExecutionPlan(mode="fused"), scene, rendered=rendered)
    print(f"{label:6s} ATE {res.ate:.4f} m, flagged frames {len(res.flagged)}")
