"""Toy training on the needle benchmark, plus the gradient-check suite.

The trainable model is a projector followed by a query-conditioned linear
probe.  The probe sees the projector tokens only through features gated by
the query: the outer product of the one-hot "which scene?" query with the
flattened tokens, concatenated with the query itself.  A query-agnostic
readout (flattened tokens plus the query, linearly combined) cannot exceed
75% on this task: for any two composites that differ by swapping the scenes
at positions i and j, queries i and j swap their correct answers while the
token features are what they are, so at most three of each such quadruple of
(composite, query) cases can be answered correctly.  Gating by the query
removes that ceiling while keeping the probe linear in the tokens for every
fixed query, so accuracy still measures what the projector preserved.

``gradient_suite`` finite-difference-checks every differentiable operation
and the full loss-through-projector pipeline; the CLI and the test suite
share it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import (
    PositionalEncoding,
    init_attention_params,
    init_layer_norm,
    init_qformer_block,
    init_qformer_params,
    multihead_cross_attention,
    normal_init,
    qformer_block,
    qformer_forward,
)
from .costmodel import ProjectorDescriptor, build_projector, projector_tokens, token_count
from .prng import Prng
from .projectors import (
    EspressoConfig,
    ProjectorOutput,
    espresso_tokens,
    init_espresso_params,
    init_mlp_params,
    mlp_apply,
)
from .synthbench import SCENES_PER_COMPOSITE, NeedleDataset, make_needle_dataset
from .tensor import (
    DenseTensor,
    GradTape,
    ShapeError,
    add,
    broadcast_to,
    concat,
    finite_diff_grad_check,
    gelu,
    iter_tensors,
    layer_norm,
    linear,
    matmul,
    mean_axis,
    mul,
    permute,
    record_op,
    reshape,
    scale,
    softmax_lastdim,
    sum_all,
)

LOSS_WINDOW = 100
GRAD_TOL = 1e-4


# --------------------------------------------------------------------------
# loss

def cross_entropy(logits: DenseTensor, labels) -> DenseTensor:
    """Mean cross-entropy of ``logits`` against integer labels.

    Accepts ``[M]`` logits with one label or ``[B, M]`` logits with ``B``
    labels.  Fused forward/backward: the forward computes a max-shifted
    log-sum-exp, the backward is ``(softmax - onehot) / B``.
    """
    if len(logits.shape) == 1:
        logits = reshape(logits, (1,) + logits.shape)
        labels = [labels]
    if len(logits.shape) != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(
            f"cross_entropy got {logits.shape} logits but labels of shape {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")

    z = logits.nd
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    expz = np.exp(shifted)
    total = expz.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    loss = DenseTensor(-log_probs[np.arange(batch), labels].mean())

    probs = expz / total

    def backward(grad_out):
        g = probs.copy()
        g[np.arange(batch), labels] -= 1.0
        g *= float(grad_out) / batch
        return (g,)

    return record_op(loss, (logits,), backward)


# --------------------------------------------------------------------------
# probe

@dataclass
class ProbeParams:
    """Linear readout over query-gated token features."""

    weight: DenseTensor  # [positions * tokens * dim + positions, classes]
    bias: DenseTensor  # [classes]


def probe_feature_len(positions: int, num_tokens: int, dim: int) -> int:
    return positions * num_tokens * dim + positions


def init_probe(positions: int, num_tokens: int, dim: int, classes: int,
               prng: Prng) -> ProbeParams:
    rows = probe_feature_len(positions, num_tokens, dim)
    return ProbeParams(
        weight=normal_init((rows, classes), prng),
        bias=normal_init((classes,), prng),
    )


def probe_forward(tokens, query: DenseTensor, params: ProbeParams) -> DenseTensor:
    """Class logits from projector tokens and a one-hot scene query.

    ``tokens`` is a ``ProjectorOutput``, a ``[L, D]`` tensor with a ``[Q]``
    query, or a ``[B, L, D]`` tensor with a ``[B, Q]`` query.  Features are
    ``[flatten(query ⊗ flatten(tokens)); query]``.
    """
    if isinstance(tokens, ProjectorOutput):
        tokens = tokens.tokens
    single = len(tokens.shape) == 2
    if single:
        tokens = reshape(tokens, (1,) + tokens.shape)
        query = reshape(query, (1,) + query.shape)
    if len(tokens.shape) != 3 or len(query.shape) != 2:
        raise ShapeError(
            f"probe_forward expects [B, L, D] tokens with a [B, Q] query, "
            f"got {tokens.shape} and {query.shape}"
        )
    batch, num_tokens, dim = tokens.shape
    positions = query.shape[1]
    if query.shape[0] != batch:
        raise ShapeError(f"query batch {query.shape[0]} != token batch {batch}")
    rows = probe_feature_len(positions, num_tokens, dim)
    if params.weight.shape[0] != rows:
        raise ShapeError(
            f"probe weight has {params.weight.shape[0]} rows but "
            f"{positions} positions x {num_tokens} tokens x {dim} dims needs {rows}"
        )

    flat = reshape(tokens, (batch, num_tokens * dim))
    gated = mul(reshape(query, (batch, positions, 1)),
                reshape(flat, (batch, 1, num_tokens * dim)))
    feats = concat([reshape(gated, (batch, positions * num_tokens * dim)), query], axis=1)
    logits = linear(feats, params.weight, params.bias)
    if single:
        logits = reshape(logits, (logits.shape[1],))
    return logits


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamParams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    """Bias-corrected first/second moments over a fixed parameter list."""

    def __init__(self, tensors, hyper: AdamParams | None = None):
        self.hyper = hyper if hyper is not None else AdamParams()
        self.tensors: list[DenseTensor] = list(tensors)
        self.m = [np.zeros(t.size) for t in self.tensors]
        self.v = [np.zeros(t.size) for t in self.tensors]
        self.step = 0


def adam_step(state: AdamState, tape: GradTape) -> None:
    """One in-place update from the gradients accumulated on ``tape``."""
    state.step += 1
    h = state.hyper
    correct1 = 1.0 - h.beta1 ** state.step
    correct2 = 1.0 - h.beta2 ** state.step
    for p, m, v in zip(state.tensors, state.m, state.v):
        grad = tape.grad(p)
        if grad is None:
            continue
        g = grad.reshape(-1)
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * (g * g)
        p.data -= h.lr * (m / correct1) / (np.sqrt(v / correct2) + h.eps)


# --------------------------------------------------------------------------
# training loop

@dataclass
class NeedleModel:
    descriptor: ProjectorDescriptor
    projector: object
    probe: ProbeParams


@dataclass
class TrainReport:
    kind: str
    steps: int
    batch_size: int
    seed: int
    loss_history: list[float]
    final_loss: float
    window: int
    first_window_mean: float
    last_window_mean: float
    eval_accuracy: float | None
    config: dict


def model_parameters(model: NeedleModel) -> list[tuple[str, DenseTensor]]:
    """All trainable tensors, named, in a stable order."""
    named = list(iter_tensors(model.projector, "projector"))
    named.extend(iter_tensors(model.probe, "probe"))
    return named


def _gather_batch(dataset: NeedleDataset, indices) -> tuple[DenseTensor, DenseTensor, np.ndarray]:
    feats = np.stack([dataset.examples[i].composite.features.nd for i in indices])
    query = np.stack([dataset.examples[i].target_onehot.nd for i in indices])
    labels = np.array([dataset.examples[i].label for i in indices], dtype=np.int64)
    return DenseTensor(feats), DenseTensor(query), labels


def _check_dataset(descriptor: ProjectorDescriptor, dataset: NeedleDataset, role: str) -> None:
    cfg = descriptor.config
    if dataset.feat_dim != cfg.feat_dim:
        raise ValueError(
            f"{role} dataset feat_dim {dataset.feat_dim} != projector feat_dim {cfg.feat_dim}"
        )
    if len(dataset) == 0:
        raise ValueError(f"{role} dataset is empty")


def train_needle(descriptor: ProjectorDescriptor, dataset: NeedleDataset, *,
                 steps: int, batch_size: int, seed: int,
                 eval_dataset: NeedleDataset | None = None,
                 hyper: AdamParams | None = None,
                 window: int = LOSS_WINDOW) -> tuple[TrainReport, NeedleModel]:
    """Train projector + probe on the needle task with Adam.

    One splitmix64 stream seeded with ``seed`` drives everything, consumed in
    a fixed order: projector parameters, probe parameters, then ``batch_size``
    example indices per step (each a raw draw reduced modulo the dataset
    size).  Identical inputs give identical float histories.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    _check_dataset(descriptor, dataset, "train")
    if eval_dataset is not None:
        _check_dataset(descriptor, eval_dataset, "eval")

    cfg = descriptor.config
    master = Prng(seed)
    projector = build_projector(descriptor, prng=master)
    num_tokens = token_count(descriptor, dataset.composite_frames, dataset.patches)
    probe = init_probe(SCENES_PER_COMPOSITE, num_tokens, cfg.llm_dim,
                       dataset.num_classes, master)
    model = NeedleModel(descriptor=descriptor, projector=projector, probe=probe)

    params = [t for _, t in model_parameters(model)]
    state = AdamState(params, hyper)
    n_examples = len(dataset)

    history: list[float] = []
    for _ in range(steps):
        indices = [master.next_u64() % n_examples for _ in range(batch_size)]
        feats, query, labels = _gather_batch(dataset, indices)
        with GradTape() as tape:
            tokens = projector_tokens(descriptor, projector, feats)
            logits = probe_forward(tokens, query, probe)
            loss = cross_entropy(logits, labels)
            tape.backward(loss)
        adam_step(state, tape)
        history.append(loss.item())

    eval_accuracy = None
    if eval_dataset is not None:
        eval_accuracy = evaluate_accuracy(model, eval_dataset)

    window = min(window, steps)
    report = TrainReport(
        kind=descriptor.kind,
        steps=steps,
        batch_size=batch_size,
        seed=seed,
        loss_history=history,
        final_loss=history[-1],
        window=window,
        first_window_mean=float(np.mean(history[:window])),
        last_window_mean=float(np.mean(history[-window:])),
        eval_accuracy=eval_accuracy,
        config={"kind": descriptor.kind, "pr_queries": descriptor.pr_queries,
                **asdict(cfg)},
    )
    return report, model


def evaluate_accuracy(model: NeedleModel, dataset: NeedleDataset,
                      batch_size: int = 64) -> float:
    """Fraction of examples whose argmax logit matches the label.

    Ties resolve to the lowest class index.  Runs without a tape.
    """
    _check_dataset(model.descriptor, dataset, "eval")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        indices = range(start, min(start + batch_size, len(dataset)))
        feats, query, labels = _gather_batch(dataset, indices)
        tokens = projector_tokens(model.descriptor, model.projector, feats)
        logits = probe_forward(tokens, query, model.probe)
        correct += int((np.argmax(logits.nd, axis=1) == labels).sum())
    return correct / len(dataset)


# --------------------------------------------------------------------------
# gradient checks

@dataclass
class GradCheckResult:
    name: str
    rel_err: float


def _unit(shape, prng: Prng) -> DenseTensor:
    """Unit-scale standard-normal tensor (op checks want O(1) inputs)."""
    n = 1
    for s in shape:
        n *= s
    return DenseTensor(prng.normals(n).reshape(shape))


def _weighted(out: DenseTensor, prng: Prng) -> DenseTensor:
    """Scalarize with a fixed random weighting so every entry matters."""
    return sum_all(mul(out, _unit(out.shape, prng)))


def gradient_suite(h: float = 1e-5) -> list[GradCheckResult]:
    """Finite-difference check of every operation's backward pass.

    Each entry perturbs every parameter entry centrally with step ``h`` and
    reports the worst relative error against the taped gradient.  The final
    entry runs the full pipeline: cross-entropy through the probe and a
    four-segment projector on a small needle batch.
    """
    results: list[GradCheckResult] = []

    def check(name: str, f, params) -> None:
        results.append(GradCheckResult(name, finite_diff_grad_check(f, params, h)))

    prng = Prng(90210)
    # matmul: both operands, including a stacked (batched) pair.
    a = _unit((4, 3), prng)
    b = _unit((3, 5), prng)
    w_ab = _unit((4, 5), prng)
    check("matmul", lambda: sum_all(mul(matmul(a, b), w_ab)), [a, b])
    a3 = _unit((2, 4, 3), prng)
    b3 = _unit((2, 3, 5), prng)
    w_ab3 = _unit((2, 4, 5), prng)
    check("matmul_batched", lambda: sum_all(mul(matmul(a3, b3), w_ab3)), [a3, b3])

    x = _unit((2, 3, 5), prng)
    w = _unit((5, 4), prng)
    bias = _unit((4,), prng)
    w_lin = _unit((2, 3, 4), prng)
    check("linear", lambda: sum_all(mul(linear(x, w, bias), w_lin)), [x, w, bias])

    u = _unit((3, 4), prng)
    v = _unit((3, 4), prng)
    suffix = _unit((4,), prng)
    w_add = _unit((3, 4), prng)
    check("add", lambda: sum_all(mul(add(u, v), w_add)), [u, v])
    check("add_broadcast", lambda: sum_all(mul(add(u, suffix), w_add)), [u, suffix])

    m1 = _unit((2, 3, 1), prng)
    m2 = _unit((1, 5), prng)
    w_mul = _unit((2, 3, 5), prng)
    check("mul", lambda: sum_all(mul(mul(m1, m2), w_mul)), [m1, m2])

    s = _unit((3, 4), prng)
    w_s = _unit((3, 4), prng)
    check("scale", lambda: sum_all(mul(scale(s, -1.7), w_s)), [s])

    br = _unit((5,), prng)
    w_br = _unit((3, 5), prng)
    check("broadcast_to", lambda: sum_all(mul(broadcast_to(br, (3, 5)), w_br)), [br])

    rs = _unit((2, 6), prng)
    w_rs = _unit((3, 4), prng)
    check("reshape", lambda: sum_all(mul(reshape(rs, (3, 4)), w_rs)), [rs])

    pm = _unit((2, 3, 4), prng)
    w_pm = _unit((4, 2, 3), prng)
    check("permute", lambda: sum_all(mul(permute(pm, (2, 0, 1)), w_pm)), [pm])

    c1 = _unit((2, 3), prng)
    c2 = _unit((2, 5), prng)
    w_cc = _unit((2, 8), prng)
    check("concat", lambda: sum_all(mul(concat([c1, c2], axis=1), w_cc)), [c1, c2])

    mn = _unit((3, 4, 5), prng)
    w_mn = _unit((3, 5), prng)
    check("mean_axis", lambda: sum_all(mul(mean_axis(mn, 1), w_mn)), [mn])

    sm = _unit((3, 6), prng)
    w_sm = _unit((3, 6), prng)
    check("softmax_lastdim", lambda: sum_all(mul(softmax_lastdim(sm), w_sm)), [sm])

    ge = _unit((2, 7), prng)
    w_ge = _unit((2, 7), prng)
    check("gelu", lambda: sum_all(mul(gelu(ge), w_ge)), [ge])

    ln_x = _unit((3, 6), prng)
    ln = init_layer_norm(6)
    w_ln = _unit((3, 6), prng)
    check("layer_norm",
          lambda: sum_all(mul(layer_norm(ln_x, ln.gain, ln.bias), w_ln)),
          [ln_x, ln.gain, ln.bias])

    ce_logits = _unit((4, 5), prng)
    ce_labels = np.array([0, 3, 1, 4])
    check("cross_entropy", lambda: cross_entropy(ce_logits, ce_labels), [ce_logits])

    dim, heads = 6, 2
    attn = init_attention_params(dim, heads, prng)
    q_in = _unit((2, 3, dim), prng)
    kv_in = _unit((2, 5, dim), prng)
    w_at = _unit((2, 3, dim), prng)
    attn_params = [q_in, kv_in] + [t for _, t in iter_tensors(attn)]
    check("attention",
          lambda: sum_all(mul(multihead_cross_attention(q_in, kv_in, attn), w_at)),
          attn_params)

    block = init_qformer_block(dim, heads, 2, prng)
    blk_q = _unit((2, 3, dim), prng)
    blk_kv = _unit((2, 4, dim), prng)
    w_blk = _unit((2, 3, dim), prng)
    blk_params = [blk_q, blk_kv] + [t for _, t in iter_tensors(block)]
    check("qformer_block",
          lambda: sum_all(mul(qformer_block(blk_q, blk_kv, block), w_blk)),
          blk_params)

    qf = init_qformer_params(num_queries=2, dim=dim, heads=heads, blocks=1,
                             ffn_mult=2, prng=prng)
    qf_kv = _unit((2, 4, dim), prng)
    w_qf = _unit((2, 2, dim), prng)
    pe = PositionalEncoding("sinusoidal")
    qf_params = [qf_kv] + [t for _, t in iter_tensors(qf)]
    check("qformer_forward",
          lambda: sum_all(mul(qformer_forward(qf_kv, qf, pe), w_qf)),
          qf_params)

    mlp = init_mlp_params(5, 4, prng)
    mlp_x = _unit((3, 5), prng)
    w_mlp = _unit((3, 4), prng)
    mlp_params = [mlp_x] + [t for _, t in iter_tensors(mlp)]
    check("mlp_apply", lambda: sum_all(mul(mlp_apply(mlp_x, mlp), w_mlp)), mlp_params)

    esp_cfg = EspressoConfig(feat_dim=4, llm_dim=4, spatial_queries=1,
                             temporal_queries=1, segments=2, heads=2, blocks=1,
                             ffn_mult=2, seed=11)
    esp = init_espresso_params(esp_cfg, Prng(esp_cfg.seed))
    esp_in = _unit((4, 2, esp_cfg.feat_dim), prng)
    w_esp = _unit((esp_cfg.out_tokens, esp_cfg.llm_dim), prng)
    esp_params = [t for _, t in iter_tensors(esp)]
    check("espresso_tokens",
          lambda: sum_all(mul(espresso_tokens(esp_in, esp, esp_cfg), w_esp)),
          esp_params)

    pr_tokens_in = _unit((2, 3, 4), prng)
    pr_query = DenseTensor(np.eye(2)[np.array([1, 0])])
    pr_probe = init_probe(2, 3, 4, 3, prng)
    w_pr = _unit((2, 3), prng)
    probe_params = [pr_tokens_in, pr_probe.weight, pr_probe.bias]
    check("probe_forward",
          lambda: sum_all(mul(probe_forward(pr_tokens_in, pr_query, pr_probe), w_pr)),
          probe_params)

    results.append(GradCheckResult("pipeline", _pipeline_grad_check(h)))
    return results


def _pipeline_grad_check(h: float) -> float:
    """Cross-entropy through probe and projector on a small needle batch.

    Projector grid: 8 composite frames, 4 patches, 8 feature dims, 8 output
    dims, 4 segments; every projector and probe parameter is perturbed.
    """
    cfg = EspressoConfig(feat_dim=8, llm_dim=8, spatial_queries=2,
                         temporal_queries=2, segments=4, heads=2, blocks=1,
                         ffn_mult=2, seed=5)
    descriptor = ProjectorDescriptor(kind="espresso", config=cfg)
    dataset = make_needle_dataset(2, base_seed=77, scene_frames=2, patches=4,
                                  feat_dim=cfg.feat_dim)

    master = Prng(303)
    projector = build_projector(descriptor, prng=master)
    probe = init_probe(SCENES_PER_COMPOSITE,
                       token_count(descriptor, dataset.composite_frames, dataset.patches),
                       cfg.llm_dim, dataset.num_classes, master)
    feats, query, labels = _gather_batch(dataset, range(len(dataset)))

    def f():
        tokens = projector_tokens(descriptor, projector, feats)
        return cross_entropy(probe_forward(tokens, query, probe), labels)

    params = [t for _, t in iter_tensors(projector)]
    params.extend([probe.weight, probe.bias])
    return finite_diff_grad_check(f, params, h)


def max_rel_err(results: list[GradCheckResult]) -> float:
    return max(r.rel_err for r in results)
