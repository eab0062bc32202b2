"""Gradient verification suite.

Runs central-difference checks on every differentiable op and, on request,
on the complete model (masked attention, adapters, train-mode batch norm
included). All checks run in float64 with a 1e-5 pass threshold.
"""

from dataclasses import dataclass

import numpy as np

from .model import EmoNet, ModelConfig
from .nn import Tensor, grad_check
from .nn import ops

PASS_THRESHOLD = 1e-5


@dataclass
class CheckOutcome:
    name: str
    max_rel_error: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < PASS_THRESHOLD


def _uniform_away_from_zero(rng, shape, low=0.1, high=1.0):
    # keeps |x| >= low so kinked ops (relu) see no sign flips under h
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _run(name, build_loss, tensors, seed) -> CheckOutcome:
    result = grad_check(build_loss, tensors, seed=seed)
    return CheckOutcome(name, result.max_rel_error, sum(c.coords_checked for c in result.checks))


def op_checks(seed: int = 0) -> list:
    """One check per differentiable op, small random float64 cases."""
    rng = np.random.default_rng(seed)
    outcomes = []

    def t(shape, away=False):
        values = _uniform_away_from_zero(rng, shape) if away else rng.standard_normal(shape)
        return Tensor(np.asarray(values, dtype=np.float64))

    x = t((2, 6, 7, 3))
    k = t((3, 3, 3, 4))
    r = rng.standard_normal((2, 6, 7, 4))
    outcomes.append(
        _run("conv2d_s1", lambda: ops.project_sum(ops.conv2d(x, k, stride=1), r), {"x": x, "k": k}, seed)
    )

    x2 = t((2, 7, 9, 2))
    k2 = t((3, 3, 2, 3))
    r2 = rng.standard_normal((2, 4, 5, 3))
    outcomes.append(
        _run("conv2d_s2", lambda: ops.project_sum(ops.conv2d(x2, k2, stride=2), r2), {"x": x2, "k": k2}, seed)
    )

    xb = t((5, 4, 3))
    gamma = Tensor(rng.uniform(0.5, 1.5, 3))
    beta = t((3,))
    mean = np.zeros(3)
    var = np.ones(3)
    rb = rng.standard_normal((5, 4, 3))
    for training in (True, False):
        tag = "train" if training else "eval"
        outcomes.append(
            _run(
                f"batch_norm_{tag}",
                lambda training=training: ops.project_sum(
                    ops.batch_norm(xb, gamma, beta, mean.copy(), var.copy(), training=training), rb
                ),
                {"x": xb, "gamma": gamma, "beta": beta},
                seed,
            )
        )

    xr = t((3, 4), away=True)
    rr = rng.standard_normal((3, 4))
    outcomes.append(_run("relu", lambda: ops.project_sum(ops.relu(xr), rr), {"x": xr}, seed))
    outcomes.append(_run("tanh", lambda: ops.project_sum(ops.tanh(xr), rr), {"x": xr}, seed))

    xm = t((2, 3, 4))
    wm = t((4, 5))
    bm = t((5,))
    rm = rng.standard_normal((2, 3, 5))
    outcomes.append(
        _run(
            "dense",
            lambda: ops.project_sum(ops.dense(xm, wm, bm), rm),
            {"x": xm, "w": wm, "b": bm},
            seed,
        )
    )

    xp = t((2, 5, 9, 3))
    lengths = np.array([9, 5])
    rp = rng.standard_normal((2, 3, 5, 3))
    outcomes.append(
        _run(
            "avg_pool2x2_masked",
            lambda: ops.project_sum(ops.avg_pool2x2(xp, lengths=lengths), rp),
            {"x": xp},
            seed,
        )
    )

    rc = rng.standard_normal((2, 5, 9, 5))
    outcomes.append(
        _run(
            "concat_zero_channels",
            lambda: ops.project_sum(ops.concat_zero_channels(xp, 2), rc),
            {"x": xp},
            seed,
        )
    )

    rt = rng.standard_normal((2, 5, 9, 3))
    outcomes.append(
        _run(
            "mask_time",
            lambda: ops.project_sum(ops.mask_time(xp, lengths), rt),
            {"x": xp},
            seed,
        )
    )

    scores = t((2, 8))
    mask = np.ones((2, 8), dtype=bool)
    mask[0, 5:] = False
    rs = rng.standard_normal((2, 8))
    outcomes.append(
        _run(
            "masked_softmax",
            lambda: ops.project_sum(ops.masked_softmax(scores, lam=0.3, mask=mask), rs),
            {"scores": scores},
            seed,
        )
    )

    xa = t((2, 4, 5, 3))
    wa = t((3, 4))
    ba = t((4,))
    ua = t((4,))
    amask = np.ones((2, 20), dtype=bool)
    amask[1, 12:] = False
    ra = rng.standard_normal((2, 3))
    outcomes.append(
        _run(
            "attention_pool_masked",
            lambda: ops.project_sum(
                ops.attention_pool(xa, wa, ba, ua, lam=0.3, mask=amask)[0], ra
            ),
            {"x": xa, "w": wa, "b": ba, "u": ua},
            seed,
        )
    )

    logits = t((4, 5))
    labels = np.array([0, 2, 4, 2])
    weights = np.array([1.5, 0.5, 1.0, 2.0, 1.0])
    outcomes.append(
        _run(
            "softmax_xent_weighted",
            lambda: ops.softmax_xent(logits, labels, weights),
            {"logits": logits},
            seed,
        )
    )

    xd = t((3, 4))
    rd = rng.standard_normal((3, 4))
    outcomes.append(
        _run(
            "dropout_fixed_mask",
            # rebuilding the rng gives the same mask on every evaluation
            lambda: ops.project_sum(
                ops.dropout(xd, 0.5, np.random.default_rng(123), training=True), rd
            ),
            {"x": xd},
            seed,
        )
    )

    return outcomes


def full_model_check(seed: int = 0, max_coords: int = 2000, config: ModelConfig | None = None) -> CheckOutcome:
    """Check the whole network end to end against finite differences.

    Uses a padded two-sample batch (masking active), train-mode batch norm,
    a fixed dropout mask, adapters and the weighted loss, checking a seeded
    proportional subset of all parameters.
    """
    config = config or ModelConfig()
    model = EmoNet(config, seed=seed, dtype=np.float64)
    model.add_domain("check", 5)
    rng = np.random.default_rng(seed + 1)
    # nonzero adapters so their gradient path is exercised
    for name, p in model.params.items():
        if ".adapter." in name:
            p.value[...] = 0.01 * rng.standard_normal(p.value.shape)
    batch = rng.standard_normal((2, config.mel_bands, 13, 1))
    lengths = [13, 9]
    labels = np.array([1, 3])
    weights = np.array([1.5, 0.5, 1.0, 2.0, 1.0])

    def build_loss():
        logits = model.forward(
            batch, lengths, "check", training=True, rng=np.random.default_rng(999)
        )
        return ops.softmax_xent(logits, labels, weights)

    result = grad_check(
        build_loss, dict(model.params), max_coords=max_coords, seed=seed, retry_h=1e-6
    )
    return CheckOutcome(
        "full_model", result.max_rel_error, sum(c.coords_checked for c in result.checks)
    )


def run_suite(full: bool = False, seed: int = 0) -> list:
    outcomes = op_checks(seed=seed)
    if full:
        outcomes.append(full_model_check(seed=seed))
    return outcomes


def format_outcomes(outcomes) -> str:
    width = max(len(o.name) for o in outcomes)
    lines = []
    for o in outcomes:
        status = "ok" if o.passed else "FAIL"
        lines.append(f"{o.name.ljust(width)}  {o.max_rel_error:12.3e}  {o.coords_checked:>6d} coords  {status}")
    worst = max(o.max_rel_error for o in outcomes)
    lines.append(f"{'worst'.ljust(width)}  {worst:12.3e}  threshold {PASS_THRESHOLD:g}")
    return "\n".join(lines)
