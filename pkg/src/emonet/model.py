"""Residual CNN with attention pooling and per-domain adapter branches.

The shared backbone is a 13-convolution ResNet: a 3x3 stem, then three
stacks of two residual blocks (64/128/256 filters; the first block of each
stack downsamples by 2 and doubles channels via an avg-pool + zero-channel
shortcut), then a final BN+ReLU. Every convolution has, per domain, a
parallel 1x1 adapter whose output is added to the conv output before that
domain's batch norm. Attention pooling collapses the time-frequency map to
a 256-vector which a small per-domain head classifies.

Parameters are named hierarchically (e.g. shared.stack2.block1.conv1.kernel,
domain.emodb.head.dense1.kernel); the shared/domain partition is derived
from these names. Adapters are zero-initialized so a freshly added domain
computes exactly the backbone-only function.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .errors import (
    ConfigError,
    CorruptCheckpoint,
    DuplicateDomain,
    ShapeMismatch,
    UnknownDomain,
    UnknownRegime,
    VersionMismatch,
)
from .nn import Parameter, Tensor, ops

CHECKPOINT_VERSION = 1
REGIMES = ("scratch", "full_finetune", "head_only", "adapters", "multi_domain")


@dataclass(frozen=True)
class ModelConfig:
    mel_bands: int = 64
    stem_filters: int = 32
    stack_filters: tuple[int, ...] = (64, 128, 256)
    blocks_per_stack: int = 2
    attention_dim: int = 256
    attention_lambda: float = 0.3
    # 64 head units keeps the per-domain budget near the intended ~300k
    # (adapters already contribute ~301k; a 256-unit head would overshoot).
    head_units: int = 64
    dropout_rate: float = 0.5
    attention_shared: bool = True
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "stack_filters", tuple(self.stack_filters))
        for prev, cur in zip(self.stack_filters, self.stack_filters[1:]):
            if cur != 2 * prev:
                raise ConfigError(f"stack_filters must double: {self.stack_filters}")
        if self.attention_dim != self.stack_filters[-1]:
            raise ConfigError(
                f"attention_dim {self.attention_dim} must equal the last stack's "
                f"filter count {self.stack_filters[-1]}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1): {self.dropout_rate}")

    def conv_plan(self) -> list[tuple[str, int, int, int]]:
        """(path, c_in, c_out, stride) of every backbone conv, stem first."""
        plan = [("stem.conv", 1, self.stem_filters, 1)]
        c_in = self.stem_filters
        for s, filters in enumerate(self.stack_filters, start=1):
            for b in range(1, self.blocks_per_stack + 1):
                first = b == 1
                plan.append((f"stack{s}.block{b}.conv1", c_in, filters, 2 if first else 1))
                plan.append((f"stack{s}.block{b}.conv2", filters, filters, 1))
                c_in = filters
        return plan

    def bn_plan(self) -> list[tuple[str, int]]:
        """(path, channels) of every per-domain batch norm."""
        plan = [("stem.bn", self.stem_filters)]
        for s, filters in enumerate(self.stack_filters, start=1):
            for b in range(1, self.blocks_per_stack + 1):
                plan.append((f"stack{s}.block{b}.bn1", filters))
                plan.append((f"stack{s}.block{b}.bn2", filters))
        plan.append(("final.bn", self.stack_filters[-1]))
        plan.append(("head.bn", self.head_units))
        return plan


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _domain_entropy(domain_id: str) -> int:
    return zlib.crc32(domain_id.encode("utf-8"))


class EmoNet:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.domains: dict[str, int] = {}
        self._init_shared()

    # --- construction -----------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig, domains, seed: int = 0, dtype=np.float32) -> "EmoNet":
        model = cls(config, seed=seed, dtype=dtype)
        for domain_id, class_count in domains:
            model.add_domain(domain_id, class_count)
        return model

    def _add_param(self, name: str, value: np.ndarray) -> None:
        assert name not in self.params, name
        self.params[name] = Parameter(name, np.asarray(value, dtype=self.dtype))

    def _init_shared(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 2**33]))
        for path, c_in, c_out, _ in cfg.conv_plan():
            kernel = _he_normal(rng, (3, 3, c_in, c_out), 9 * c_in, self.dtype)
            self._add_param(f"shared.{path}.kernel", kernel)
        if cfg.attention_shared:
            self._init_attention("shared.attention", rng)

    def _init_attention(self, prefix: str, rng: np.random.Generator) -> None:
        c = self.config.attention_dim
        self._add_param(f"{prefix}.w", _he_normal(rng, (c, c), c, self.dtype))
        self._add_param(f"{prefix}.b", np.zeros(c, dtype=self.dtype))
        self._add_param(f"{prefix}.u", (rng.normal(size=c) / np.sqrt(c)).astype(self.dtype))

    def add_domain(self, domain_id: str, class_count: int, seed: int | None = None) -> None:
        """Register a domain: zero adapters, fresh BNs, He-initialized head."""
        if domain_id in self.domains:
            raise DuplicateDomain(f"domain {domain_id!r} already registered")
        if class_count < 2:
            raise ConfigError(f"domain {domain_id!r} needs at least 2 classes")
        cfg = self.config
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed if seed is None else seed, _domain_entropy(domain_id)])
        )
        d = f"domain.{domain_id}"
        for path, c_in, c_out, _ in cfg.conv_plan():
            self._add_param(
                f"{d}.{path}.adapter.kernel", np.zeros((1, 1, c_in, c_out), dtype=self.dtype)
            )
        for path, channels in cfg.bn_plan():
            self._add_param(f"{d}.{path}.gamma", np.ones(channels, dtype=self.dtype))
            self._add_param(f"{d}.{path}.beta", np.zeros(channels, dtype=self.dtype))
            self.buffers[f"{d}.{path}.running_mean"] = np.zeros(channels, dtype=self.dtype)
            self.buffers[f"{d}.{path}.running_var"] = np.ones(channels, dtype=self.dtype)
        if not cfg.attention_shared:
            self._init_attention(f"{d}.attention", rng)
        c = cfg.attention_dim
        # no bias on dense1: the batch norm right after it would absorb one
        self._add_param(f"{d}.head.dense1.kernel", _he_normal(rng, (c, cfg.head_units), c, self.dtype))
        self._add_param(
            f"{d}.head.dense2.kernel",
            _he_normal(rng, (cfg.head_units, class_count), cfg.head_units, self.dtype),
        )
        self._add_param(f"{d}.head.dense2.bias", np.zeros(class_count, dtype=self.dtype))
        self.domains[domain_id] = int(class_count)

    def remove_domain(self, domain_id: str) -> None:
        if domain_id not in self.domains:
            raise UnknownDomain(f"domain {domain_id!r} not registered")
        prefix = f"domain.{domain_id}."
        for name in [n for n in self.params if n.startswith(prefix)]:
            del self.params[name]
        for name in [n for n in self.buffers if n.startswith(prefix)]:
            del self.buffers[name]
        del self.domains[domain_id]

    def reset_domain(self, domain_id: str, class_count: int, seed: int | None = None) -> None:
        """Fresh modules for transfer: drop the domain if present, re-add."""
        if domain_id in self.domains:
            self.remove_domain(domain_id)
        self.add_domain(domain_id, class_count, seed=seed)

    # --- parameter partition ------------------------------------------------

    def shared_names(self) -> set[str]:
        return {n for n in self.params if n.startswith("shared.")}

    def domain_names(self, domain_id: str) -> set[str]:
        if domain_id not in self.domains:
            raise UnknownDomain(f"domain {domain_id!r} not registered")
        prefix = f"domain.{domain_id}."
        return {n for n in self.params if n.startswith(prefix)}

    def trainable_set(self, regime: str, domain_id: str) -> set[str]:
        if regime not in REGIMES:
            raise UnknownRegime(f"regime {regime!r} not one of {REGIMES}")
        if domain_id not in self.domains:
            raise UnknownDomain(f"domain {domain_id!r} not registered")
        d = f"domain.{domain_id}."
        if regime in ("scratch", "full_finetune", "multi_domain"):
            return self.shared_names() | self.domain_names(domain_id)
        if regime == "head_only":
            return {n for n in self.params if n.startswith(d + "head.")}
        # adapters regime: everything the domain owns (adapters, BNs, head,
        # and attention when not shared), nothing shared
        return self.domain_names(domain_id)

    def parameter_counts(self) -> dict:
        shared = sum(p.value.size for n, p in self.params.items() if n.startswith("shared."))
        domains = {
            d: sum(p.value.size for n, p in self.params.items() if n.startswith(f"domain.{d}."))
            for d in self.domains
        }
        return {"total": shared + sum(domains.values()), "shared": shared, "domains": domains}

    # --- forward ------------------------------------------------------------

    def _conv_with_adapter(self, x: Tensor, path: str, stride: int, d: str, use_adapters: bool) -> Tensor:
        out = ops.conv2d(x, self.params[f"shared.{path}.kernel"], stride=stride)
        if use_adapters:
            adapter = ops.conv2d(x, self.params[f"{d}.{path}.adapter.kernel"], stride=stride)
            out = ops.add(out, adapter)
        return out

    def _bn(self, x: Tensor, path: str, d: str, training: bool, lengths=None) -> Tensor:
        cfg = self.config
        out = ops.batch_norm(
            x,
            self.params[f"{d}.{path}.gamma"],
            self.params[f"{d}.{path}.beta"],
            self.buffers[f"{d}.{path}.running_mean"],
            self.buffers[f"{d}.{path}.running_var"],
            training=training,
            eps=cfg.bn_epsilon,
            momentum=cfg.bn_momentum,
        )
        if lengths is not None:
            # BN shifts padded zeros to beta-dependent constants; re-zero them
            # so padding never leaks into later convolutions or the pooling.
            out = ops.mask_time(out, lengths)
        return out

    def backbone(
        self,
        batch,
        lengths,
        domain_id: str,
        training: bool,
        use_adapters: bool = True,
    ) -> tuple[Tensor, np.ndarray]:
        """Features [B, mel/8, ceil(T/8), C] plus per-sample valid widths."""
        if domain_id not in self.domains:
            raise UnknownDomain(f"domain {domain_id!r} not registered")
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if x.value.ndim != 4 or x.value.shape[1] != self.config.mel_bands or x.value.shape[3] != 1:
            raise ShapeMismatch(
                f"expected [B, {self.config.mel_bands}, T, 1] input, got {x.value.shape}"
            )
        valid = np.asarray(lengths, dtype=np.int64)
        d = f"domain.{domain_id}"

        x = self._conv_with_adapter(x, "stem.conv", 1, d, use_adapters)
        x = self._bn(x, "stem.bn", d, training, valid)

        for s, filters in enumerate(self.config.stack_filters, start=1):
            for b in range(1, self.config.blocks_per_stack + 1):
                if b == 1:
                    down = -(-valid // 2)
                    c_in = x.value.shape[-1]
                    shortcut = ops.concat_zero_channels(
                        ops.avg_pool2x2(x, lengths=valid), filters - c_in
                    )
                    h = self._conv_with_adapter(x, f"stack{s}.block{b}.conv1", 2, d, use_adapters)
                    h = ops.relu(self._bn(h, f"stack{s}.block{b}.bn1", d, training, down))
                    h = self._conv_with_adapter(h, f"stack{s}.block{b}.conv2", 1, d, use_adapters)
                    h = self._bn(h, f"stack{s}.block{b}.bn2", d, training, down)
                    x = ops.relu(ops.add(h, shortcut))
                    valid = down
                else:
                    h = self._conv_with_adapter(x, f"stack{s}.block{b}.conv1", 1, d, use_adapters)
                    h = ops.relu(self._bn(h, f"stack{s}.block{b}.bn1", d, training, valid))
                    h = self._conv_with_adapter(h, f"stack{s}.block{b}.conv2", 1, d, use_adapters)
                    h = self._bn(h, f"stack{s}.block{b}.bn2", d, training, valid)
                    x = ops.relu(ops.add(h, x))

        x = ops.relu(self._bn(x, "final.bn", d, training, valid))
        return x, valid

    def forward(
        self,
        batch,
        lengths,
        domain_id: str,
        training: bool,
        rng: np.random.Generator | None = None,
        use_adapters: bool = True,
    ) -> Tensor:
        """Logits [B, K] for one domain."""
        cfg = self.config
        features, valid = self.backbone(batch, lengths, domain_id, training, use_adapters)
        d = f"domain.{domain_id}"

        n_batch, n_freq, n_time, _ = features.value.shape
        time_mask = np.arange(n_time)[None, :] < valid[:, None]
        position_mask = np.broadcast_to(
            time_mask[:, None, :], (n_batch, n_freq, n_time)
        ).reshape(n_batch, n_freq * n_time)
        att = "shared.attention" if cfg.attention_shared else f"{d}.attention"
        pooled, _ = ops.attention_pool(
            features,
            self.params[f"{att}.w"],
            self.params[f"{att}.b"],
            self.params[f"{att}.u"],
            lam=cfg.attention_lambda,
            mask=position_mask,
        )

        h = ops.matmul_last(pooled, self.params[f"{d}.head.dense1.kernel"])
        h = self._bn(h, "head.bn", d, training)
        if training and cfg.dropout_rate > 0.0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")
        h = ops.dropout(h, cfg.dropout_rate, rng, training)
        return ops.dense(h, self.params[f"{d}.head.dense2.kernel"], self.params[f"{d}.head.dense2.bias"])

    def predict(self, features_list, domain_id: str) -> np.ndarray:
        """Eval-mode logits [N, K], one sample at a time.

        Per-sample forward makes each prediction trivially independent of
        batch companions and of padding.
        """
        k = self.domains.get(domain_id)
        if k is None:
            raise UnknownDomain(f"domain {domain_id!r} not registered")
        out = np.empty((len(features_list), k), dtype=self.dtype)
        for i, feats in enumerate(features_list):
            batch = np.ascontiguousarray(feats.T, dtype=self.dtype)[None, :, :, None]
            logits = self.forward(batch, [feats.shape[0]], domain_id, training=False)
            out[i] = logits.value[0]
        return out


# --- checkpoints ----------------------------------------------------------------

def _manifest_entries(model: EmoNet) -> list[dict]:
    entries = []
    offset = 0
    names = sorted(model.params) + sorted(model.buffers)
    for name in names:
        trainable = name in model.params
        array = model.params[name].value if trainable else model.buffers[name]
        entries.append(
            {
                "name": name,
                "shape": list(array.shape),
                "dtype": "<f4",
                "offset": offset,
                "trainable": trainable,
            }
        )
        offset += array.size * 4
    return entries


def save_checkpoint(model: EmoNet, path, rng_state=None, extra=None) -> None:
    """Write meta.json (config, manifest, frontend settings) + params.bin."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = _manifest_entries(model)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "domains": dict(model.domains),
        "seed": model.seed,
        "rng_state": rng_state,
        "frontend": {
            "sample_rate": dsp.SAMPLE_RATE,
            "n_fft": dsp.N_FFT,
            "hop": dsp.HOP,
            "n_mels": dsp.N_MELS,
            "fmin_hz": dsp.FMIN_HZ,
            "fmax_hz": dsp.FMAX_HZ,
            "log_floor": dsp.LOG_FLOOR,
            "crop_seconds": dsp.CROP_SECONDS,
        },
        "entries": entries,
        "extra": extra or {},
    }
    with open(path / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(path / "params.bin", "wb") as fh:
        for entry in entries:
            name = entry["name"]
            array = model.params[name].value if entry["trainable"] else model.buffers[name]
            fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> EmoNet:
    """Bit-exact inverse of save_checkpoint."""
    path = Path(path)
    try:
        with open(path / "meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise CorruptCheckpoint(f"{path}: missing meta.json") from exc
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: unreadable meta.json ({exc})") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")

    config = ModelConfig(**meta["config"])
    model = EmoNet.build(
        config, list(meta["domains"].items()), seed=meta.get("seed", 0), dtype=dtype
    )
    blob = (path / "params.bin").read_bytes()
    entries = meta["entries"]
    expected_names = set(model.params) | set(model.buffers)
    manifest_names = {e["name"] for e in entries}
    if manifest_names != expected_names:
        missing = sorted(expected_names - manifest_names)[:3]
        surplus = sorted(manifest_names - expected_names)[:3]
        raise CorruptCheckpoint(f"{path}: manifest mismatch (missing {missing}, surplus {surplus})")
    total_bytes = sum(int(np.prod(e["shape"])) * 4 for e in entries)
    if len(blob) != total_bytes:
        raise CorruptCheckpoint(f"{path}: params.bin has {len(blob)} bytes, manifest says {total_bytes}")

    for entry in entries:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        size = int(np.prod(shape)) if shape else 1
        raw = blob[offset : offset + size * 4]
        if len(raw) != size * 4:
            raise CorruptCheckpoint(f"{path}: truncated payload for {name}")
        value = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
        target = model.params[name].value if entry["trainable"] else model.buffers[name]
        if target.shape != value.shape:
            raise CorruptCheckpoint(f"{path}: {name} shape {value.shape} != built {target.shape}")
        target[...] = value
    return model


def checkpoint_meta(path) -> dict:
    try:
        with open(Path(path) / "meta.json", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise CorruptCheckpoint(f"{path}: missing meta.json") from exc
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: unreadable meta.json ({exc})") from exc
