"""Learned preference over temporal prompts.

A tiny transformer scores each candidate prompt against the reference:
the input sequence is [class token, N projected candidate-frame tokens,
N projected reference-frame tokens, one projected text token], role and
temporal embeddings mark who is who, a single post-norm encoder layer
mixes them, and a linear head reads the raw score off the class position.
Binary labels say "this candidate beats the reference in box mIoU", the
loss is binary cross-entropy summed over a video's candidates, and the
optimizer is Adam.

Everything is plain float64 numpy with hand-written backpropagation, so
training is bitwise reproducible and the analytic gradient can be checked
against central finite differences (:func:`grad_check`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .errors import (
    ConfigurationError,
    DivergenceError,
    EmptyBatchError,
    EmptySelectionError,
    EmptyVideoError,
    ParseError,
    ShapeError,
    ValidationError,
)
from .geometry import BoxSequence, box_miou
from .io import SCHEMA_VERSION, FeatureRecord

__all__ = [
    "PreferenceSample",
    "PreferenceClassifier",
    "Selection",
    "sample_frame_indices",
    "sample_track_tokens",
    "samples_from_features",
    "make_labels",
    "bce_loss",
    "grad_check",
    "GradCheckReport",
    "select",
    "save_checkpoint",
    "load_checkpoint",
]

_LN_EPS = 1e-5

# roles index the embedding table; the class token enters the sequence
# bare, so row 0 is defined but never added and its gradient stays zero.
ROLE_CLASS, ROLE_CANDIDATE, ROLE_REFERENCE, ROLE_TEXT = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class PreferenceSample:
    """Model input for one (candidate, reference, text) triple."""

    video_id: str
    prompt_id: int
    candidate_tokens: np.ndarray  # (N, d_in)
    reference_tokens: np.ndarray  # (N, d_in)
    text_token: np.ndarray  # (d_in,)
    label: int | None = None

    def __post_init__(self):
        cand = np.asarray(self.candidate_tokens, dtype=np.float64)
        ref = np.asarray(self.reference_tokens, dtype=np.float64)
        text = np.asarray(self.text_token, dtype=np.float64)
        if cand.ndim != 2 or ref.shape != cand.shape:
            raise ShapeError(
                f"candidate {cand.shape} and reference {ref.shape} token blocks must "
                "share one (N, d_in) shape"
            )
        if text.shape != (cand.shape[1],):
            raise ShapeError(
                f"text token shape {text.shape} does not match d_in {cand.shape[1]}"
            )
        object.__setattr__(self, "candidate_tokens", cand)
        object.__setattr__(self, "reference_tokens", ref)
        object.__setattr__(self, "text_token", text)


def sample_frame_indices(n_total: int, n_samples: int) -> list[int]:
    """n_samples frame indices evenly spaced over 1..n_total.

    Endpoints are always included; spacing rounds half-up so the result is
    platform independent. Short videos repeat frames (the list is
    non-decreasing, strictly increasing whenever n_total >= n_samples).
    """
    if n_total < 1:
        raise EmptyVideoError(f"cannot sample from {n_total} frames")
    if n_samples < 1:
        raise ValidationError(f"need at least one sample, got {n_samples}")
    if n_samples == 1:
        return [1]
    out = []
    for k in range(n_samples):
        x = 1 + (n_total - 1) * k / (n_samples - 1)
        out.append(int(np.floor(x + 0.5)))
    return out


def sample_track_tokens(vectors: np.ndarray, n_samples: int) -> np.ndarray:
    """Pick evenly spaced rows of a per-frame feature matrix."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ShapeError(f"expected (T, d_in) feature matrix, got shape {vectors.shape}")
    indices = sample_frame_indices(vectors.shape[0], n_samples)
    return vectors[[i - 1 for i in indices], :]


def samples_from_features(
    records: list[FeatureRecord], n_frames: int
) -> dict[str, list[PreferenceSample]]:
    """Group feature records by video and build one sample per candidate."""
    by_video: dict[str, dict[str, list[FeatureRecord]]] = {}
    for rec in records:
        by_video.setdefault(rec.video_id, {}).setdefault(rec.kind, []).append(rec)
    out: dict[str, list[PreferenceSample]] = {}
    for video_id in sorted(by_video):
        kinds = by_video[video_id]
        if "reference" not in kinds or "text" not in kinds:
            raise ValidationError(
                f"video {video_id!r} needs reference and text feature records"
            )
        ref_tokens = sample_track_tokens(kinds["reference"][0].vectors, n_frames)
        text_token = kinds["text"][0].vectors[0]
        samples = []
        for rec in sorted(kinds.get("candidate_track", []), key=lambda r: r.prompt_id):
            samples.append(
                PreferenceSample(
                    video_id=video_id,
                    prompt_id=rec.prompt_id,
                    candidate_tokens=sample_track_tokens(rec.vectors, n_frames),
                    reference_tokens=ref_tokens,
                    text_token=text_token,
                )
            )
        out[video_id] = samples
    return out


def make_labels(candidates, reference, gt: BoxSequence) -> np.ndarray:
    """1 where a candidate's box mIoU strictly beats the reference's."""
    ref_miou = box_miou(reference.boxes, gt)
    return np.array(
        [1 if box_miou(c.boxes, gt) > ref_miou else 0 for c in candidates],
        dtype=np.int64,
    )


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class _ModelConfig:
    d_in: int
    d_model: int
    n_heads: int
    n_frames: int

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for name in ("d_in", "d_model", "n_heads", "n_frames"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")


def _param_spec(cfg: _ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, di, n = cfg.d_model, cfg.d_in, cfg.n_frames
    return [
        ("vis_w1", (di, d), "fan_in"),
        ("vis_b1", (d,), "zero"),
        ("vis_w2", (d, d), "fan_in"),
        ("vis_b2", (d,), "zero"),
        ("txt_w1", (di, d), "fan_in"),
        ("txt_b1", (d,), "zero"),
        ("txt_w2", (d, d), "fan_in"),
        ("txt_b2", (d,), "zero"),
        ("cls", (d,), "embed"),
        ("role", (4, d), "embed"),
        ("temporal", (n, d), "embed"),
        ("attn_wq", (d, d), "fan_in"),
        ("attn_bq", (d,), "zero"),
        ("attn_wk", (d, d), "fan_in"),
        ("attn_bk", (d,), "zero"),
        ("attn_wv", (d, d), "fan_in"),
        ("attn_bv", (d,), "zero"),
        ("attn_wo", (d, d), "fan_in"),
        ("attn_bo", (d,), "zero"),
        ("ln1_g", (d,), "one"),
        ("ln1_b", (d,), "zero"),
        ("ffn_w1", (d, 4 * d), "fan_in"),
        ("ffn_b1", (4 * d,), "zero"),
        ("ffn_w2", (4 * d, d), "fan_in"),
        ("ffn_b2", (d,), "zero"),
        ("ln2_g", (d,), "one"),
        ("ln2_b", (d,), "zero"),
        ("head_w", (d,), "fan_in"),
        ("head_b", (1,), "zero"),
    ]


def _init_params(cfg: _ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape, kind in _param_spec(cfg):
        if kind == "fan_in":
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif kind == "embed":
            params[name] = rng.normal(0.0, 0.02, size=shape)
        elif kind == "one":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


# ---------------------------------------------------------------------------
# forward / backward


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv = cache
    d = xhat.shape[-1]
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = (
        inv
        / d
        * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
    )
    return dx, dg, db


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    length, d = x.shape
    return x.reshape(length, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    n_heads, length, dh = x.shape
    return x.transpose(1, 0, 2).reshape(length, n_heads * dh)


def _forward(params: dict, cfg: _ModelConfig, sample: PreferenceSample):
    n = cfg.n_frames
    if sample.candidate_tokens.shape != (n, cfg.d_in):
        raise ConfigurationError(
            f"sample token block {sample.candidate_tokens.shape} does not match the "
            f"model's (n_frames={n}, d_in={cfg.d_in})"
        )
    cand, ref, text = sample.candidate_tokens, sample.reference_tokens, sample.text_token

    vis_pre_c = cand @ params["vis_w1"] + params["vis_b1"]
    vis_act_c = np.maximum(vis_pre_c, 0.0)
    cand_proj = vis_act_c @ params["vis_w2"] + params["vis_b2"]
    vis_pre_r = ref @ params["vis_w1"] + params["vis_b1"]
    vis_act_r = np.maximum(vis_pre_r, 0.0)
    ref_proj = vis_act_r @ params["vis_w2"] + params["vis_b2"]
    txt_pre = text @ params["txt_w1"] + params["txt_b1"]
    txt_act = np.maximum(txt_pre, 0.0)
    txt_proj = txt_act @ params["txt_w2"] + params["txt_b2"]

    x0 = np.concatenate(
        [
            params["cls"][None, :],
            cand_proj + params["role"][ROLE_CANDIDATE] + params["temporal"],
            ref_proj + params["role"][ROLE_REFERENCE] + params["temporal"],
            (txt_proj + params["role"][ROLE_TEXT])[None, :],
        ]
    )  # (L, d), L = 2N + 2

    q = x0 @ params["attn_wq"] + params["attn_bq"]
    k = x0 @ params["attn_wk"] + params["attn_bk"]
    v = x0 @ params["attn_wv"] + params["attn_bv"]
    qh, kh, vh = (_split_heads(m, cfg.n_heads) for m in (q, k, v))
    scale = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)
    logits = qh @ kh.transpose(0, 2, 1) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    heads = weights @ vh
    attn_cat = _merge_heads(heads)
    attn_out = attn_cat @ params["attn_wo"] + params["attn_bo"]

    x1, ln1_cache = _layer_norm(x0 + attn_out, params["ln1_g"], params["ln1_b"])
    ffn_pre = x1 @ params["ffn_w1"] + params["ffn_b1"]
    ffn_act = np.maximum(ffn_pre, 0.0)
    ffn_out = ffn_act @ params["ffn_w2"] + params["ffn_b2"]
    x2, ln2_cache = _layer_norm(x1 + ffn_out, params["ln2_g"], params["ln2_b"])

    score_value = float(x2[0] @ params["head_w"] + params["head_b"][0])
    cache = {
        "cand": cand,
        "ref": ref,
        "text": text,
        "vis_pre_c": vis_pre_c,
        "vis_act_c": vis_act_c,
        "vis_pre_r": vis_pre_r,
        "vis_act_r": vis_act_r,
        "txt_pre": txt_pre,
        "txt_act": txt_act,
        "x0": x0,
        "qh": qh,
        "kh": kh,
        "vh": vh,
        "weights": weights,
        "attn_cat": attn_cat,
        "ln1_cache": ln1_cache,
        "x1": x1,
        "ffn_pre": ffn_pre,
        "ffn_act": ffn_act,
        "ln2_cache": ln2_cache,
        "x2": x2,
        "scale": scale,
    }
    return score_value, cache


def _backward(params: dict, cfg: _ModelConfig, cache: dict, d_score: float) -> dict:
    n = cfg.n_frames
    grads = {name: np.zeros_like(p) for name, p in params.items()}

    x2 = cache["x2"]
    dx2 = np.zeros_like(x2)
    dx2[0] = d_score * params["head_w"]
    grads["head_w"] += d_score * x2[0]
    grads["head_b"] += d_score

    du2, dg, db = _layer_norm_backward(dx2, cache["ln2_cache"], params["ln2_g"])
    grads["ln2_g"] += dg
    grads["ln2_b"] += db
    dx1 = du2.copy()
    dffn_out = du2

    dffn_act = dffn_out @ params["ffn_w2"].T
    grads["ffn_w2"] += cache["ffn_act"].T @ dffn_out
    grads["ffn_b2"] += dffn_out.sum(axis=0)
    dffn_pre = dffn_act * (cache["ffn_pre"] > 0)
    grads["ffn_w1"] += cache["x1"].T @ dffn_pre
    grads["ffn_b1"] += dffn_pre.sum(axis=0)
    dx1 += dffn_pre @ params["ffn_w1"].T

    du1, dg, db = _layer_norm_backward(dx1, cache["ln1_cache"], params["ln1_g"])
    grads["ln1_g"] += dg
    grads["ln1_b"] += db
    dx0 = du1.copy()
    dattn_out = du1

    grads["attn_wo"] += cache["attn_cat"].T @ dattn_out
    grads["attn_bo"] += dattn_out.sum(axis=0)
    dattn_cat = dattn_out @ params["attn_wo"].T
    dheads = _split_heads(dattn_cat, cfg.n_heads)

    weights, vh, qh, kh = cache["weights"], cache["vh"], cache["qh"], cache["kh"]
    dweights = dheads @ vh.transpose(0, 2, 1)
    dvh = weights.transpose(0, 2, 1) @ dheads
    dlogits = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
    dqh = dlogits @ kh * cache["scale"]
    dkh = dlogits.transpose(0, 2, 1) @ qh * cache["scale"]

    x0 = cache["x0"]
    for mat, dmh, wname, bname in (
        (dqh, None, "attn_wq", "attn_bq"),
        (dkh, None, "attn_wk", "attn_bk"),
        (dvh, None, "attn_wv", "attn_bv"),
    ):
        dm = _merge_heads(mat)
        grads[wname] += x0.T @ dm
        grads[bname] += dm.sum(axis=0)
        dx0 += dm @ params[wname].T

    grads["cls"] += dx0[0]
    dcand_proj = dx0[1 : n + 1]
    dref_proj = dx0[n + 1 : 2 * n + 1]
    dtxt_proj = dx0[2 * n + 1]
    grads["role"][ROLE_CANDIDATE] += dcand_proj.sum(axis=0)
    grads["role"][ROLE_REFERENCE] += dref_proj.sum(axis=0)
    grads["role"][ROLE_TEXT] += dtxt_proj
    grads["temporal"] += dcand_proj + dref_proj

    for dproj, act, pre, src in (
        (dcand_proj, cache["vis_act_c"], cache["vis_pre_c"], cache["cand"]),
        (dref_proj, cache["vis_act_r"], cache["vis_pre_r"], cache["ref"]),
    ):
        grads["vis_w2"] += act.T @ dproj
        grads["vis_b2"] += dproj.sum(axis=0)
        dact = dproj @ params["vis_w2"].T
        dpre = dact * (pre > 0)
        grads["vis_w1"] += src.T @ dpre
        grads["vis_b1"] += dpre.sum(axis=0)

    grads["txt_w2"] += np.outer(cache["txt_act"], dtxt_proj)
    grads["txt_b2"] += dtxt_proj
    dtxt_act = params["txt_w2"] @ dtxt_proj
    dtxt_pre = dtxt_act * (cache["txt_pre"] > 0)
    grads["txt_w1"] += np.outer(cache["text"], dtxt_pre)
    grads["txt_b1"] += dtxt_pre
    return grads


# ---------------------------------------------------------------------------
# loss


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def bce_loss(scores, labels) -> float:
    """Binary cross-entropy from raw scores, summed over the batch.

    Computed as softplus(s) - y*s, which equals
    -[y log sigmoid(s) + (1-y) log(1 - sigmoid(s))] without overflowing
    for large |s|.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.shape[0]} scores vs {labels.shape[0]} labels")
    if scores.shape[0] == 0:
        raise EmptyBatchError("bce_loss needs at least one score")
    return float(np.sum(_softplus(scores) - labels * scores))


def _bce_grad(score_value: float, label: float) -> float:
    return float(expit(score_value) - label)


# ---------------------------------------------------------------------------
# estimator


class PreferenceClassifier(BaseEstimator, ClassifierMixin):
    """Binary classifier over (candidate, reference, text) prompt triples.

    Follows the familiar estimator protocol: hyperparameters in
    ``__init__``, :meth:`fit` consumes samples plus 0/1 labels,
    :meth:`decision_function` returns raw scores, :meth:`predict_proba`
    their sigmoids. Training visits one video per optimizer step (all of
    its candidates together, losses summed), videos in sorted-id order,
    and is bitwise deterministic for a fixed seed.
    """

    def __init__(
        self,
        d_in: int = 16,
        d_model: int = 64,
        n_heads: int = 4,
        n_frames: int = 8,
        learning_rate: float = 1e-4,
        epochs: int = 50,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        seed: int = 0,
    ):
        self.d_in = d_in
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_frames = n_frames
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.seed = seed

    # -- plumbing

    def _config(self) -> _ModelConfig:
        return _ModelConfig(self.d_in, self.d_model, self.n_heads, self.n_frames)

    def _coerce_samples(self, X) -> list[PreferenceSample]:
        samples = []
        for i, item in enumerate(X):
            if isinstance(item, PreferenceSample):
                samples.append(item)
            else:
                try:
                    cand, ref, text = item
                except (TypeError, ValueError) as e:
                    raise ValidationError(
                        f"sample {i} is neither a PreferenceSample nor a "
                        "(candidate, reference, text) triple"
                    ) from e
                samples.append(
                    PreferenceSample(
                        video_id=str(i),
                        prompt_id=0,
                        candidate_tokens=cand,
                        reference_tokens=ref,
                        text_token=text,
                    )
                )
        return samples

    def initialize(self, rng: np.random.Generator | None = None) -> "PreferenceClassifier":
        """Set up randomly initialized parameters without training."""
        rng = rng or np.random.default_rng(self.seed)
        self.params_ = _init_params(self._config(), rng)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = self.d_in
        self.history_ = []
        return self

    # -- training

    def fit(self, X, y=None, groups=None):
        """Train on samples. X is a sequence of PreferenceSample (or
        (candidate, reference, text) triples); y defaults to the samples'
        labels; groups marks which video each sample belongs to (defaults
        to the samples' video ids)."""
        samples = self._coerce_samples(X)
        if not samples:
            raise EmptyBatchError("no training samples")
        if y is None:
            y = [s.label for s in samples]
            if any(v is None for v in y):
                raise ValidationError("labels missing: pass y or label the samples")
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.shape[0] != len(samples):
            raise ShapeError(f"{len(samples)} samples vs {y.shape[0]} labels")
        if not np.all((y == 0) | (y == 1)):
            raise ValidationError("labels must be 0 or 1")
        if groups is None:
            groups = [s.video_id for s in samples]
        groups = [str(g) for g in groups]
        if len(groups) != len(samples):
            raise ShapeError(f"{len(samples)} samples vs {len(groups)} groups")

        cfg = self._config()
        self.initialize(np.random.default_rng(self.seed))
        params = self.params_

        videos: dict[str, list[int]] = {}
        for i, g in enumerate(groups):
            videos.setdefault(g, []).append(i)
        order = sorted(videos)

        m_state = {name: np.zeros_like(p) for name, p in params.items()}
        v_state = {name: np.zeros_like(p) for name, p in params.items()}
        t_step = 0

        for epoch in range(self.epochs):
            epoch_loss = 0.0
            correct = 0
            for video in order:
                idx = videos[video]
                grads = {name: np.zeros_like(p) for name, p in params.items()}
                video_loss = 0.0
                for i in idx:
                    s_val, cache = _forward(params, cfg, samples[i])
                    video_loss += bce_loss([s_val], [y[i]])
                    if (expit(s_val) > 0.5) == bool(y[i]):
                        correct += 1
                    sample_grads = _backward(params, cfg, cache, _bce_grad(s_val, y[i]))
                    for name in grads:
                        grads[name] += sample_grads[name]
                if not np.isfinite(video_loss):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch + 1}, video {video!r}"
                    )
                epoch_loss += video_loss
                t_step += 1
                bc1 = 1.0 - self.beta1**t_step
                bc2 = 1.0 - self.beta2**t_step
                for name, p in params.items():
                    g = grads[name]
                    m_state[name] = self.beta1 * m_state[name] + (1 - self.beta1) * g
                    v_state[name] = self.beta2 * v_state[name] + (1 - self.beta2) * g * g
                    p -= (
                        self.learning_rate
                        * (m_state[name] / bc1)
                        / (np.sqrt(v_state[name] / bc2) + self.epsilon)
                    )
            self.history_.append(
                {
                    "epoch": epoch + 1,
                    "loss": epoch_loss / len(order),
                    "accuracy": correct / len(samples),
                }
            )
        return self

    # -- inference

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        cfg = self._config()
        samples = self._coerce_samples(X)
        return np.array([_forward(self.params_, cfg, s)[0] for s in samples])

    def predict_proba(self, X) -> np.ndarray:
        p1 = expit(self.decision_function(X))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0.0).astype(int)


def score(model: PreferenceClassifier, sample: PreferenceSample) -> float:
    """Raw preference score of one sample."""
    check_is_fitted(model, "params_")
    return _forward(model.params_, model._config(), sample)[0]


# ---------------------------------------------------------------------------
# gradient check


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)


def grad_check(
    model: PreferenceClassifier,
    sample: PreferenceSample,
    label: int = 1,
    step: float = 1e-5,
    max_entries: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Perturbs up to max_entries entries of every parameter tensor (chosen
    deterministically from the seed) and reports the worst relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6). The floor
    keeps finite-difference round-off on genuinely zero gradients from
    registering as error.
    """
    check_is_fitted(model, "params_")
    cfg = model._config()
    params = model.params_
    s_val, cache = _forward(params, cfg, sample)
    analytic = _backward(params, cfg, cache, _bce_grad(s_val, float(label)))

    def loss_now() -> float:
        s, _ = _forward(params, cfg, sample)
        return bce_loss([s], [float(label)])

    rng = np.random.default_rng(seed)
    per_tensor = {}
    worst = 0.0
    for name in sorted(params):
        tensor = params[name]
        flat_size = tensor.size
        if flat_size <= max_entries:
            entries = np.arange(flat_size)
        else:
            entries = np.sort(rng.choice(flat_size, size=max_entries, replace=False))
        tensor_worst = 0.0
        flat = tensor.ravel()
        for j in entries:
            original = flat[j]
            flat[j] = original + step
            loss_plus = loss_now()
            flat[j] = original - step
            loss_minus = loss_now()
            flat[j] = original
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            a = analytic[name].ravel()[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            tensor_worst = max(tensor_worst, rel)
        per_tensor[name] = tensor_worst
        worst = max(worst, tensor_worst)
    return GradCheckReport(worst, per_tensor)


def analytic_gradients(
    model: PreferenceClassifier, sample: PreferenceSample, label: int
) -> dict[str, np.ndarray]:
    """Gradients of the BCE loss for one sample, by parameter name."""
    check_is_fitted(model, "params_")
    cfg = model._config()
    s_val, cache = _forward(model.params_, cfg, sample)
    return _backward(model.params_, cfg, cache, _bce_grad(s_val, float(label)))


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class Selection:
    """Outcome of prompt selection for one video.

    prompt_id is None when no candidate clears the 0.5 probability bar and
    the reference proposal should be used.
    """

    prompt_id: int | None
    probabilities: dict[int, float]


def select(model: PreferenceClassifier, samples: list[PreferenceSample]) -> Selection:
    """Pick the candidate with the highest preferred-probability, if any
    clears 0.5 (strictly); otherwise fall back to the reference. Ties go to
    the lowest prompt id; with no candidates at all the max is vacuous and
    the reference wins."""
    if not samples:
        return Selection(None, {})
    ordered = sorted(samples, key=lambda s: s.prompt_id)
    raw = model.decision_function(ordered)
    probs = expit(raw)
    by_id = {s.prompt_id: float(p) for s, p in zip(ordered, probs)}
    best_idx = int(np.argmax(probs))
    if probs[best_idx] > 0.5:
        return Selection(ordered[best_idx].prompt_id, by_id)
    return Selection(None, by_id)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: PreferenceClassifier) -> None:
    """Write a fitted model as a versioned record stream."""
    check_is_fitted(model, "params_")
    header = {
        "schema": SCHEMA_VERSION,
        "kind": "preference_checkpoint",
        "config": {
            "d_in": model.d_in,
            "d_model": model.d_model,
            "n_heads": model.n_heads,
            "n_frames": model.n_frames,
            "learning_rate": model.learning_rate,
            "epochs": model.epochs,
            "beta1": model.beta1,
            "beta2": model.beta2,
            "epsilon": model.epsilon,
            "seed": model.seed,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for name in sorted(model.params_):
            tensor = model.params_[name]
            fh.write(
                json.dumps(
                    {
                        "name": name,
                        "shape": list(tensor.shape),
                        "data": [float(v) for v in tensor.ravel()],
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def load_checkpoint(path) -> PreferenceClassifier:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in (l.strip() for l in fh) if line]
    if not lines:
        raise ParseError("empty checkpoint file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", line=1) from e
    if header.get("schema") != SCHEMA_VERSION or header.get("kind") != "preference_checkpoint":
        raise ParseError("not a preference checkpoint", line=1)
    model = PreferenceClassifier(**header["config"])
    expected = {name: shape for name, shape, _ in _param_spec(model._config())}
    params = {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", line=lineno) from e
        name = rec.get("name")
        if name not in expected:
            raise ParseError(f"unknown parameter {name!r}", line=lineno)
        shape = tuple(rec["shape"])
        if shape != expected[name]:
            raise ParseError(
                f"parameter {name!r} has shape {shape}, expected {expected[name]}",
                line=lineno,
            )
        tensor = np.array(rec["data"], dtype=np.float64)
        if tensor.size != int(np.prod(shape)):
            raise ParseError(f"parameter {name!r} data does not fill {shape}", line=lineno)
        params[name] = tensor.reshape(shape)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ParseError(f"checkpoint missing parameters: {missing}")
    model.params_ = params
    model.classes_ = np.array([0, 1])
    model.n_features_in_ = model.d_in
    model.history_ = []
    return model
