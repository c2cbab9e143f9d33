"""Self-contained invariant checks behind the ``check`` CLI command.

Each check raises AssertionError with a diagnostic on failure; the runner
prints one PASS/FAIL line per invariant and reports overall status.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor, backward
from .config import RunConfig
from .data import MixtureConfig, Task, get_world
from .grouping import (ActivationProfile, ModalityTag, partition_experts,
                       profile_activations, slice_router)
from .losses import LossWeights
from .metrics import MetricsRecord, parse_record
from .model import (ArchitectureMode, Model, ModelConfig, ShieldState, build_model,
                    probe_shared_only)
from .moe import ExpertFFN, Router, apply_capacity, aux_loss, capacity_rate, route, \
    routed_forward
from .optim import build_param_groups, clip_gradients, global_grad_norm
from .rng import Rng, mix_key
from .train import compute_losses, run_training


def _fd_gradient(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = fn()
        flat[i] = keep - eps
        lo = fn()
        flat[i] = keep
        out[i] = (hi - lo) / (2 * eps)
    return grad


def _compare_grads(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-5,
                   absolute: float = 1e-8) -> None:
    err = np.abs(analytic - numeric)
    tol = absolute + rel * np.maximum(np.abs(analytic), np.abs(numeric))
    assert (err <= tol).all(), \
        f"finite-difference mismatch, worst excess {float((err - tol).max()):.3e}"


def check_autograd_finite_differences() -> None:
    rng = Rng(mix_key(7, "verify-fd"))
    a = ag.param(rng.normals((4, 3)) * 2)
    b = ag.param(rng.normals((3, 2)) * 2)

    def value() -> float:
        h = a.data @ b.data
        s = 1.0 / (1.0 + np.exp(-h))
        return float((h * s).sum())

    out = ag.tsum(ag.silu(ag.matmul(a, b)))
    backward(out)
    _compare_grads(a.grad, _fd_gradient(value, a.data))
    _compare_grads(b.grad, _fd_gradient(value, b.data))


def check_autograd_determinism() -> None:
    def run() -> tuple[np.ndarray, np.ndarray]:
        rng = Rng(mix_key(11, "verify-det"))
        w = ag.param(rng.normals((5, 5)))
        x = Tensor(rng.normals((3, 5)))
        out = ag.tsum(ag.softmax(ag.matmul(x, w), axis=1))
        backward(out)
        return out.data.copy(), w.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert v1.tobytes() == v2.tobytes(), "forward values differ across runs"
    assert g1.tobytes() == g2.tobytes(), "gradients differ across runs"


def check_shield_identity_forward() -> None:
    rng = Rng(mix_key(13, "verify-shield"))
    x = ag.param(rng.normals((4, 4)))
    assert ag.stop_gradient(x).data.tobytes() == x.data.tobytes()
    assert ag.scale_gradient(x, 0.1).data.tobytes() == x.data.tobytes()


def check_gradient_accumulation_additive() -> None:
    x = ag.param(np.array([1.0, -2.0, 3.0]))
    loss = ag.tsum(ag.mul(x, x))
    backward(loss)
    once = x.grad.copy()
    backward(loss)
    assert np.array_equal(x.grad, 2 * once), "second backward did not double gradients"


def check_gate_normalization() -> None:
    rng = Rng(mix_key(17, "verify-gates"))
    router = Router(ag.param(rng.normals((8, 6))))
    decision = route(router, Tensor(rng.normals((12, 8))), 3)
    sums = decision.gates.data.sum(axis=1)
    assert np.abs(sums - 1.0).max() < 1e-12, "pre-drop gates do not sum to 1"


def check_gate_rank_agreement() -> None:
    rng = Rng(mix_key(19, "verify-rank"))
    router = Router(ag.param(rng.normals((8, 6))))
    tokens = Tensor(rng.normals((12, 8)))
    decision = route(router, tokens, 3)
    logits = tokens.data @ router.w.data
    picked = np.take_along_axis(logits, decision.expert_ids, axis=1)
    assert (np.diff(picked, axis=1) <= 1e-15).all(), "selected logits not descending"
    assert (np.diff(decision.gates.data, axis=1) <= 1e-15).all(), "gates not descending"


def check_aux_loss_bounds_and_uniform() -> None:
    rng = Rng(mix_key(23, "verify-aux"))
    router = Router(ag.param(rng.normals((8, 5))))
    decision = route(router, Tensor(rng.normals((16, 8))), 2)
    assert aux_loss(decision, 5, 2).item() >= 0.0, "aux loss negative"
    uniform = route(Router(ag.param(np.zeros((4, 4)))), Tensor(np.zeros((8, 4))), 4)
    assert aux_loss(uniform, 4, 4).item() == 1.0, "uniform aux loss is not exactly 1.0"


def check_forward_linearity_in_gates() -> None:
    from dataclasses import replace
    rng = Rng(mix_key(29, "verify-linear"))
    experts = [ExpertFFN.init(rng, 6, 9) for _ in range(4)]
    router = Router(ag.param(rng.normals((6, 4))))
    tokens = Tensor(rng.normals((10, 6)))
    decision = route(router, tokens, 2)
    base = routed_forward(experts, decision, tokens).data
    doubled = replace(decision, gates=ag.mul(decision.gates, 2.0))
    twice = routed_forward(experts, doubled, tokens).data
    assert np.abs(twice - 2 * base).max() < 1e-12, "routed output not linear in gates"


def check_capacity_unconstrained() -> None:
    rng = Rng(mix_key(31, "verify-cap"))
    router = Router(ag.param(rng.normals((6, 4))))
    decision = route(router, Tensor(rng.normals((9, 6))), 2)
    decision = apply_capacity(decision, 4, 100.0)
    assert capacity_rate(decision) == 1.0, "huge capacity factor still dropped tokens"


def _small_world():
    cfg = ModelConfig(d_model=8, d_ff=8, n_experts=8, top_k=2, n_layers=1,
                      vocab_size=16, d_latent=4, d_vit=4)
    mixture = MixtureConfig(vocab_size=16, batch_seqs=4, lm_len=6, mmu_vit_len=3,
                            mmu_text_len=4, t2i_prompt_len=3, latent_len=5,
                            d_latent=4, d_vit=4)
    return cfg, mixture


def check_profile_conservation() -> None:
    cfg, mixture = _small_world()
    model = build_model(cfg, ArchitectureMode.STANDARD, seed=3)
    world = get_world(mixture, 3)
    batches = [world.probe_batch(Task.LM, 0), world.probe_batch(Task.MMU, 0)]
    profile = profile_activations(model, batches)
    for layer in profile.layers():
        table = profile.counts[layer]
        for m in range(3):
            expected = int(profile.total_tokens[m]) * profile.k
            assert table[:, m].sum() == expected, \
                f"layer {layer} modality {m}: counts {table[:, m].sum()} != {expected}"


def check_partition_validity() -> None:
    rng = Rng(mix_key(37, "verify-part"))
    profile = ActivationProfile(n_experts=10, k=2)
    for layer in range(3):
        table = np.zeros((10, 3), dtype=np.int64)
        table[:, 0] = (rng.uniforms(10) * 50).astype(np.int64)
        table[:, 1] = (rng.uniforms(10) * 50).astype(np.int64)
        profile.counts[layer] = table
    profile.total_tokens = np.array([100, 100, 0], dtype=np.int64)
    for strategy in ("bimodal", "tripartite"):
        plan = partition_experts(profile, 6, strategy=strategy)
        for layer in range(3):
            plan.spec_for(layer).validate(10)


def check_slicing_rank_preservation() -> None:
    rng = Rng(mix_key(41, "verify-slice"))
    parent = Router(ag.param(rng.normals((8, 10))))
    profile = ActivationProfile(n_experts=10, k=2)
    profile.counts[0] = np.stack([(rng.uniforms(10) * 20).astype(np.int64),
                                  (rng.uniforms(10) * 20).astype(np.int64),
                                  np.zeros(10, dtype=np.int64)], axis=1)
    profile.total_tokens = np.array([40, 40, 0], dtype=np.int64)
    spec = partition_experts(profile, 6).spec_for(0)
    grouped = slice_router(parent, spec)
    tokens = rng.normals((50, 8))
    full = tokens @ parent.w.data
    for group, ids in grouped.index_map.items():
        sub = tokens @ grouped.routers[group].w.data
        restriction = full[:, ids]
        assert np.abs(sub - restriction).max() < 1e-14, "sliced logits drifted"
        assert (np.argsort(-sub, axis=1, kind="stable")
                == np.argsort(-restriction, axis=1, kind="stable")).all(), \
            "group-internal ordering changed under slicing"


def _bridged_setup(seed: int = 9):
    cfg, mixture = _small_world()
    parent = build_model(cfg, ArchitectureMode.STANDARD, seed=seed)
    world = get_world(mixture, seed)
    profile = profile_activations(parent, [world.probe_batch(Task.LM, 0),
                                           world.probe_batch(Task.MMU, 0)])
    plan = partition_experts(profile, 6)
    model = build_model(cfg, ArchitectureMode.BRIDGED, partition=plan, parent=parent,
                        seed=seed)
    return parent, model, plan, world


def check_zero_cold_start() -> None:
    parent, child, plan, _ = _bridged_setup(seed=5)
    rng = Rng(mix_key(5, "verify-zcs"))
    tokens = rng.normals((64, 8))
    spec = plan.spec_for(0)
    layer_p = parent.moe_layers[0]
    layer_c = child.moe_layers[0]
    logits = tokens @ layer_p.routers["all"].w.data
    top2 = np.argsort(-logits, axis=1, kind="stable")[:, :2]
    checked = 0
    for limit_set, tag in ((set(spec.und_ids), ModalityTag.TEXT),
                           (set(spec.gen_ids), ModalityTag.VAE)):
        rows = [i for i in range(64) if set(top2[i]) <= limit_set]
        if not rows:
            continue
        x = Tensor(tokens[rows])
        with ag.no_grad():
            out_p = layer_p.forward(x, np.zeros(len(rows), dtype=np.int64),
                                    capacity_off=True)
            out_c = layer_c.forward(x, np.full(len(rows), int(tag)), capacity_off=True)
        diff = np.abs(out_p.data - out_c.data).max()
        assert diff < 1e-12, f"cold-start deviation {diff:.2e} for tag {int(tag)}"
        checked += len(rows)
    assert checked > 0, "no tokens had group-contained top-k sets"


_IMG_ONLY = LossWeights(lambda_disc=0.0, lambda_aux=0.0, lambda_img=1.0)


def check_modality_isolation() -> None:
    _, model, _, world = _bridged_setup()
    sheet = world.batch(Task.T2I, 1)
    out = compute_losses(model, sheet, ShieldState(99, 10, 0.1), _IMG_ONLY)
    backward(out.total)
    for name, p in model.named_parameters():
        if ".moe.und." in name:
            assert p.grad is None or np.abs(p.grad).max() == 0.0, \
                f"understanding expert {name} touched by generative-only loss"


def _shared_grads(step: int, scale: float) -> dict[str, np.ndarray]:
    _, model, _, world = _bridged_setup()
    sheet = world.batch(Task.T2I, 1)
    shield = ShieldState(step=step, warmup_steps=10, scale_after=scale)
    out = compute_losses(model, sheet, shield, _IMG_ONLY)
    backward(out.total)
    return {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for n, p in model.named_parameters() if ".moe.shared." in n}


def check_shield_exactness() -> None:
    active = _shared_grads(0, 0.1)
    assert all(np.abs(g).max() == 0.0 for g in active.values()), \
        "shield active but shared experts received generative gradient"
    scaled = _shared_grads(20, 0.1)
    unscaled = _shared_grads(20, 1.0)
    for name in scaled:
        expect = 0.1 * unscaled[name]
        err = np.abs(scaled[name] - expect)
        tol = 1e-12 * np.maximum(np.abs(expect), 1e-300)
        assert (err <= tol).all(), f"post-warmup scale mismatch on {name}"


def check_shield_forward_invariance() -> None:
    _, model, _, world = _bridged_setup()
    sheet = world.batch(Task.T2I, 1)
    with ag.no_grad():
        on = model.forward(sheet, shield=ShieldState(0, 10, 0.1))
        off = model.forward(sheet, shield=ShieldState(99, 10, 0.1))
    assert on.vocab_logits.data.tobytes() == off.vocab_logits.data.tobytes(), \
        "shield state changed forward logits"
    assert on.velocity.data.tobytes() == off.velocity.data.tobytes(), \
        "shield state changed forward velocity"


def check_probe_locality() -> None:
    _, model, _, world = _bridged_setup()
    sheet = world.batch(Task.MMU, 2)
    with ag.no_grad():
        base = probe_shared_only(model, sheet).vocab_logits.data.copy()
    rng = Rng(mix_key(3, "verify-probe"))
    for name, p in model.named_parameters():
        if ".router" in name or ".experts." in name:
            p.data = rng.normals(p.data.shape)
    with ag.no_grad():
        after = probe_shared_only(model, sheet).vocab_logits.data
    assert base.tobytes() == after.tobytes(), \
        "probe output depends on routed-expert or router weights"


def check_metrics_roundtrip() -> None:
    import json
    from dataclasses import asdict
    record = MetricsRecord(step=3, task="t2i", shield_active=True, loss_total=1.5,
                           loss_disc=0.5, loss_aux=1.0, loss_img=0.25,
                           aux_per_group={"und": 1.0}, capacity_rate=0.9375,
                           imbalance={"0": {"und": 1.25}}, tokens_text=10,
                           tokens_vae=24)
    assert parse_record(json.dumps(asdict(record))) == record, "round trip not lossless"


def check_batch_determinism() -> None:
    world = get_world(MixtureConfig(), 123)
    a = world.batch(Task.T2I, 17)
    b = world.batch(Task.T2I, 17)
    assert a.fingerprint() == b.fingerprint(), "same-step batches differ"


def check_param_group_coverage() -> None:
    cfg, _ = _small_world()
    model = build_model(cfg, ArchitectureMode.STANDARD, seed=1)
    build_param_groups(model, 1e-4, 1e-6)


def check_clip_contract() -> None:
    cfg, _ = _small_world()
    model = build_model(cfg, ArchitectureMode.STANDARD, seed=2)
    groups = build_param_groups(model, 1e-4, 1e-6)
    rng = Rng(mix_key(2, "verify-clip"))
    for _, p in model.named_parameters():
        p.grad = rng.normals(p.data.shape) * 3.0
    clip_gradients(groups, 1.0)
    assert global_grad_norm(groups) <= 1.0 + 1e-9, "post-clip norm above bound"


def check_training_determinism_short(tmp_base: str = "/tmp/moebridge-verify") -> None:
    import shutil
    from pathlib import Path
    base = Path(tmp_base)
    shutil.rmtree(base, ignore_errors=True)
    cfg = RunConfig(mode="standard", seed=7, total_steps=8, warmup_steps=2,
                    eval_every=4, batch_seqs=4, lm_len=8, latent_len=6,
                    mmu_vit_len=4, mmu_text_len=5, d_model=16, d_ff=16,
                    n_experts=8, n_layers=1, pretrain_steps=0,
                    out_dir=str(base / "a"), run_name="det")
    run_training(cfg)
    run_training(cfg.with_updates(out_dir=str(base / "b")))
    a = (base / "a" / "metrics.jsonl").read_bytes()
    b = (base / "b" / "metrics.jsonl").read_bytes()
    assert a == b, "identical configs produced different metrics bytes"


CHECKS = [
    ("autograd-finite-differences", check_autograd_finite_differences),
    ("autograd-determinism", check_autograd_determinism),
    ("shield-identity-forward", check_shield_identity_forward),
    ("gradient-accumulation-additive", check_gradient_accumulation_additive),
    ("gate-normalization", check_gate_normalization),
    ("gate-rank-agreement", check_gate_rank_agreement),
    ("aux-loss-bounds-and-uniform", check_aux_loss_bounds_and_uniform),
    ("forward-linearity-in-gates", check_forward_linearity_in_gates),
    ("capacity-unconstrained", check_capacity_unconstrained),
    ("profile-conservation", check_profile_conservation),
    ("partition-validity", check_partition_validity),
    ("slicing-rank-preservation", check_slicing_rank_preservation),
    ("zero-cold-start", check_zero_cold_start),
    ("modality-isolation", check_modality_isolation),
    ("shield-exactness", check_shield_exactness),
    ("shield-forward-invariance", check_shield_forward_invariance),
    ("probe-locality", check_probe_locality),
    ("metrics-roundtrip", check_metrics_roundtrip),
    ("batch-determinism", check_batch_determinism),
    ("param-group-coverage", check_param_group_coverage),
    ("clip-contract", check_clip_contract),
    ("training-determinism-short", check_training_determinism_short),
]


def run_checks() -> int:
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
        except Exception as exc:  # report and continue
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"PASS {name}")
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} invariants passed")
    return 1 if failures else 0
