"""End-to-end CTR model: embeddings, gated attention cascade, view fusion and head.

One parameter set serves every ablation variant; an :class:`AblationConfig`
decides which blocks the forward pass routes through. Blocks a variant does
not use simply receive zero gradient.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .asga import AsgaParams, asga_attend
from .autodiff import Tape, Tensor
from .cgdf import CONTEXTS, CgdfParams, cgdf_fuse
from .config import ConfigError, from_mapping
from .data import Batch, DataError, Instance, Vocab, check_instances, make_batch
from .gcqc import CguParams, gcqc_forward
from .layers import Mlp, SwiGluFfn, mlp_forward, swiglu_forward, xavier_init

LOGIT_CLAMP = 30.0
PROB_EPS = 1e-7
CHECKPOINT_FORMAT = "gapnet-checkpoint"
CHECKPOINT_VERSION = 1

ASGA_VARIANTS = ("full", "softmax_baseline", "naive_sigmoid", "no_pafs", "no_qgg")

# variant -> (sift inputs, output gate, score normalizer)
_ATTENTION_MODES = {
    "full": (True, True, "softmax"),
    "softmax_baseline": (False, False, "softmax"),
    "naive_sigmoid": (False, False, "sigmoid"),
    "no_pafs": (False, True, "softmax"),
    "no_qgg": (True, False, "softmax"),
}


@dataclass
class ModelConfig:
    d: int = 16
    num_heads: int = 2
    d_k: Optional[int] = None
    d_prime: Optional[int] = None
    cgdf_d_prime: Optional[int] = None
    gate_hidden: Optional[int] = None
    gate_dim: Optional[int] = None
    head_hidden: int = 64
    embedding_fan_in: Optional[int] = 1
    embedding_std: Optional[float] = None
    calibrate_sifters: bool = True
    share_pafs: bool = False
    share_view_attention: bool = False
    n_users: Optional[int] = None
    n_items: Optional[int] = None
    n_contexts: Optional[int] = None

    def __post_init__(self):
        if self.d < 1 or self.num_heads < 1 or self.head_hidden < 1:
            raise ConfigError("d, num_heads and head_hidden must be positive")
        if self.d_k is None and self.d % self.num_heads:
            raise ConfigError(f"d={self.d} is not divisible by num_heads={self.num_heads}; set d_k explicitly")

    @property
    def head_dim(self) -> int:
        return self.d_k or self.d // self.num_heads

    def with_vocab(self, vocab: Vocab) -> "ModelConfig":
        cfg = ModelConfig(**asdict(self))
        cfg.n_users = cfg.n_users or vocab.n_users
        cfg.n_items = cfg.n_items or vocab.n_items
        cfg.n_contexts = cfg.n_contexts or vocab.n_contexts
        return cfg

    @property
    def vocab(self) -> Vocab:
        if None in (self.n_users, self.n_items, self.n_contexts):
            raise ConfigError("vocabulary sizes are not set on the model config")
        return Vocab(self.n_users, self.n_items, self.n_contexts)


@dataclass
class AblationConfig:
    asga_on: bool = True
    gcqc_on: bool = True
    cgdf_on: bool = True
    asga_variant: str = "full"
    cgdf_context: str = "purified"
    second_cgu: bool = False

    def __post_init__(self):
        if self.asga_variant not in ASGA_VARIANTS:
            raise ConfigError(f"asga_variant must be one of {ASGA_VARIANTS}, got {self.asga_variant!r}")
        if self.cgdf_context not in CONTEXTS:
            raise ConfigError(f"cgdf_context must be one of {CONTEXTS}, got {self.cgdf_context!r}")

    @property
    def attention_mode(self) -> tuple:
        return _ATTENTION_MODES[self.asga_variant if self.asga_on else "softmax_baseline"]


PRESETS = {
    # component ablation
    "baseline": AblationConfig(False, False, False, "softmax_baseline"),
    "+asga": AblationConfig(True, False, False),
    "+gcqc": AblationConfig(False, True, False, "softmax_baseline"),
    "+cgdf": AblationConfig(False, False, True, "softmax_baseline"),
    "full": AblationConfig(True, True, True),
    # attention activation strategies
    "softmax": AblationConfig(False, False, False, "softmax_baseline"),
    "naive-sigmoid": AblationConfig(True, False, False, "naive_sigmoid"),
    "no-pafs": AblationConfig(True, False, False, "no_pafs"),
    "no-qgg": AblationConfig(True, False, False, "no_qgg"),
    "asga": AblationConfig(True, False, False),
    # fusion anchor composition
    "cgdf-minimalist": AblationConfig(False, False, True, "softmax_baseline", "minimalist"),
    "cgdf-full": AblationConfig(False, False, True, "softmax_baseline", "full"),
    "cgdf-purified": AblationConfig(False, False, True, "softmax_baseline", "purified"),
}

COMPONENT_PRESETS = ("baseline", "+asga", "+gcqc", "+cgdf", "full")


def preset(name: str) -> AblationConfig:
    try:
        return AblationConfig(**asdict(PRESETS[name]))
    except KeyError:
        raise ConfigError(f"unknown ablation preset {name!r}; valid presets: {', '.join(PRESETS)}") from None


@dataclass
class Overrides:
    """Diagnostic hooks that pin internal gates to constants.

    ``gate_logit`` replaces every attention gate logit, ``cgu_gate`` pins the
    intent update gate, ``view_logits`` / ``alpha`` pin the fusion weights and
    ``identity_pafs`` bypasses both sifters.
    """

    gate_logit: Optional[float] = None
    cgu_gate: Optional[float] = None
    view_logits: Optional[tuple] = None
    alpha: Optional[tuple] = None
    identity_pafs: bool = False


def _embedding_init(cfg: ModelConfig, rows: int, rng) -> Tensor:
    if cfg.embedding_std is not None:
        return Tensor(rng.normal(0.0, cfg.embedding_std, size=(rows, cfg.d)), requires_grad=True)
    return xavier_init((rows, cfg.d), cfg.embedding_fan_in or rows, cfg.d, rng)


class GapNetParams:
    """All learnable weights, addressable by dotted path."""

    def __init__(self, cfg: ModelConfig, ablation: Optional[AblationConfig] = None, seed: int = 0):
        ablation = ablation or AblationConfig()
        vocab = cfg.vocab
        rng = np.random.default_rng(seed)
        d = cfg.d
        self.cfg = cfg
        self.cgdf_context = ablation.cgdf_context
        # a lookup is a linear map from a one-hot vector, hence fan_in 1 by default;
        # embedding_fan_in=None uses the vocabulary size instead
        self.user_emb = _embedding_init(cfg, vocab.n_users, rng)
        self.item_emb = _embedding_init(cfg, vocab.n_items, rng)
        self.context_emb = _embedding_init(cfg, vocab.n_contexts, rng)
        self.pafs_target = SwiGluFfn.init(d, rng, d_prime=cfg.d_prime)
        self.pafs_seq = self.pafs_target if cfg.share_pafs else SwiGluFfn.init(d, rng, d_prime=cfg.d_prime)
        if cfg.calibrate_sifters:
            # sifted items start at the scale of the raw item table
            for sifter in {id(s): s for s in (self.pafs_target, self.pafs_seq)}.values():
                sifter.calibrate(self.item_emb.data)
        shared = AsgaParams.init(d, cfg.num_heads, cfg.head_dim, rng) if cfg.share_view_attention else None
        self.views = {v: shared or AsgaParams.init(d, cfg.num_heads, cfg.head_dim, rng) for v in ("rt", "st", "lt")}
        self.cgu = CguParams.init(d, rng)
        self.cgu2 = CguParams.init(d, rng) if ablation.second_cgu else None
        self.cgdf = CgdfParams.init(
            d,
            rng,
            context=ablation.cgdf_context,
            gate_hidden=cfg.gate_hidden,
            gate_dim=cfg.gate_dim,
            d_prime=cfg.cgdf_d_prime,
        )
        self.head = Mlp.init([6 * d, cfg.head_hidden, 1], rng)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        seen = set()

        def items():
            yield "emb.user", self.user_emb
            yield "emb.item", self.item_emb
            yield "emb.context", self.context_emb
            yield from self.pafs_target.named_parameters("pafs.target")
            yield from self.pafs_seq.named_parameters("pafs.seq")
            for v, p in self.views.items():
                yield from p.named_parameters(f"asga.{v}")
            yield from self.cgu.named_parameters("gcqc.cgu")
            if self.cgu2 is not None:
                yield from self.cgu2.named_parameters("gcqc.cgu2")
            yield from self.cgdf.named_parameters("cgdf")
            yield from self.head.named_parameters("head")

        for path, t in items():
            if id(t) not in seen:
                seen.add(id(t))
                yield path, t

    def paths(self) -> list[str]:
        return [p for p, _ in self.named_parameters()]

    def get(self, path: str) -> Tensor:
        for p, t in self.named_parameters():
            if p == path:
                return t
        raise KeyError(f"no parameter at path {path!r}")

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def set_output_prior(self, positive_rate: float) -> None:
        """Set the head's output bias to the log-odds of ``positive_rate``.

        Starting at the base rate keeps early updates from pushing every logit
        the same way, which would otherwise be absorbed by the view weights.
        """
        rate = min(max(float(positive_rate), PROB_EPS), 1.0 - PROB_EPS)
        self.head.layers[-1].b.data[:] = np.log(rate / (1.0 - rate))

    def jitter(self, scale: float, seed: int = 0) -> None:
        """Add N(0, scale^2) noise to every parameter (moves off zero-initialized points)."""
        rng = np.random.default_rng(seed)
        for _, t in self.named_parameters():
            t.data = t.data + rng.normal(0.0, scale, size=t.shape)

    def snapshot(self) -> dict:
        """Immutable value copy of every parameter, keyed by path."""
        out = {}
        for p, t in self.named_parameters():
            arr = t.data.copy()
            arr.setflags(write=False)
            out[p] = arr
        return out

    def load_snapshot(self, values: dict) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(values))
        unknown = sorted(set(values) - set(params))
        if missing or unknown:
            raise ValueError(f"snapshot mismatch: missing {missing}, unknown {unknown}")
        for p, t in params.items():
            arr = np.asarray(values[p], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"snapshot shape mismatch at {p}: {arr.shape} vs {t.shape}")
            t.data = np.array(arr, dtype=np.float64)


@dataclass
class ForwardResult:
    logits: Tensor  # [B], clamped
    diagnostics: dict = field(default_factory=dict)

    @property
    def probs(self) -> np.ndarray:
        return ad._sigmoid(self.logits.data)


def _embed_views(params: GapNetParams, batch: Batch, sift: bool) -> dict:
    """Embed (and optionally sift) all three views with a single lookup."""
    lengths = [batch.seqs[v][0].shape[1] for v in ("rt", "st", "lt")]
    ids = np.concatenate([batch.seqs[v][0] for v in ("rt", "st", "lt")], axis=1)
    if ids.shape[1] == 0:
        empty = Tensor(np.zeros((len(batch), 0, params.cfg.d)))
        return {v: empty for v in ("rt", "st", "lt")}
    if sift:
        # the sifter acts row-wise, so sift each distinct item once and gather
        uniq, inverse = np.unique(ids, return_inverse=True)
        table = swiglu_forward(params.pafs_seq, ad.gather_rows(params.item_emb, uniq))
        E = ad.gather_rows(table, inverse.reshape(ids.shape))
    else:
        E = ad.gather_rows(params.item_emb, ids)
    return dict(zip(("rt", "st", "lt"), ad.split(E, lengths, axis=1)))


def forward(
    params: GapNetParams,
    config: AblationConfig,
    batch,
    overrides: Optional[Overrides] = None,
) -> ForwardResult:
    """Score a batch (a :class:`Batch` or a list of :class:`Instance`)."""
    if not isinstance(batch, Batch):
        instances = list(batch)
        check_instances(instances, params.cfg.vocab)
        batch = make_batch(instances)
    ov = overrides or Overrides()
    use_pafs, gated, normalizer = config.attention_mode
    sift = use_pafs and not ov.identity_pafs

    e_u = ad.gather_rows(params.user_emb, batch.user)
    e_c = ad.gather_rows(params.context_emb, batch.context)
    e_t = ad.gather_rows(params.item_emb, batch.target)
    q0 = swiglu_forward(params.pafs_target, e_t) if sift else e_t
    E = _embed_views(params, batch, sift)
    masks = tuple(batch.seqs[v][1] for v in ("rt", "st", "lt"))
    attend = dict(gated=gated, normalizer=normalizer, gate_logit=ov.gate_logit)

    diag = {}
    if config.gcqc_on:
        out = gcqc_forward(
            params.views,
            params.cgu,
            q0,
            E["rt"],
            E["st"],
            E["lt"],
            masks,
            cgu_gate=ov.cgu_gate,
            second_cgu=params.cgu2 if config.second_cgu else None,
            **attend,
        )
        H = [out.H_rt, out.H_st, out.H_lt]
        diag["z1"] = out.z1_diag
    else:
        H = [
            asga_attend(params.views[v], q0, E[v], m, **attend).pooled
            for v, m in zip(("rt", "st", "lt"), masks)
        ]

    if config.cgdf_on:
        fused = cgdf_fuse(params.cgdf, q0, e_c, *H, e_u=e_u, view_logits=ov.view_logits, alpha=ov.alpha)
        v_final = fused.v_final
        diag["alpha"] = fused.alpha
    else:
        v_final = ad.concat(H)

    head_in = ad.concat([v_final, e_u, e_c, q0])
    logit = ad.reshape(mlp_forward(params.head, head_in), (len(batch),))
    diag["v_final"] = v_final.data
    return ForwardResult(ad.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP), diag)


def predict_proba(params: GapNetParams, config: AblationConfig, instances, batch_size: int = 1024, overrides=None) -> np.ndarray:
    """Click probabilities for ``instances``; no gradient tape is recorded."""
    instances = list(instances)
    check_instances(instances, params.cfg.vocab)
    out = [
        forward(params, config, make_batch(instances[i : i + batch_size]), overrides).probs
        for i in range(0, len(instances), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros(0)


def bce_loss(probs, labels) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    p = ad.clip(ad.as_tensor(probs), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    ll = ad.add(ad.mul(y, ad.log(p)), ad.mul(1.0 - y, ad.log(ad.sub(1.0, p))))
    return ad.neg(ad.mean(ll))


def batch_loss(params: GapNetParams, config: AblationConfig, batch: Batch, overrides=None) -> Tensor:
    res = forward(params, config, batch, overrides)
    return bce_loss(ad.sigmoid(res.logits), batch.labels)


def loss_and_grads(params: GapNetParams, config: AblationConfig, batch: Batch, overrides=None) -> float:
    """Forward + backward on a fresh tape; gradients land on ``params``."""
    params.zero_grad()
    with Tape() as tape:
        loss = batch_loss(params, config, batch, overrides)
        ad.backward(loss, tape)
    return loss.item()


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, params: GapNetParams, ablation: AblationConfig) -> None:
    """Write a JSON checkpoint; float repr round-trips exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d": params.cfg.d,
        "model_config": asdict(params.cfg),
        "ablation": asdict(ablation),
        "params": {
            p: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for p, t in params.named_parameters()
        },
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_checkpoint(path) -> tuple[GapNetParams, AblationConfig]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    cfg = from_mapping(ModelConfig, doc["model_config"])
    ablation = from_mapping(AblationConfig, doc["ablation"])
    params = GapNetParams(cfg, ablation)
    params.load_snapshot(
        {p: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for p, v in doc["params"].items()}
    )
    return params, ablation


def check_vocab(params: GapNetParams, instances: list[Instance]) -> None:
    try:
        check_instances(instances, params.cfg.vocab)
    except DataError as exc:
        raise DataError(f"data/vocab mismatch: {exc}") from None
