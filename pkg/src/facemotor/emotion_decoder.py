"""Content/emotion disentangling decoder: audio features -> 33 blendshapes per frame.

Architecture (all gradients hand-derived)::

    content  C = tanh(A Wc1 + bc1) Wc2 + bc2                  per frame
    emotion  e = mean_t tanh(A We1 + be1) We2 + be2           one vector
    X = C + PE                                                sinusoidal positions
    head k:  logits = (X Wq_k + e Wg_k)(X Wk_k)^T / sqrt(dh)  emotion-shifted queries
             O_k = softmax(logits) X Wv_k
    H = X + concat(O_k) Wo + bo
    Y = sigmoid(tanh(H W1 + e Wf + b1) W2 + b2)

The emotion vector enters attention as an additive logit bias
``K_s . (e Wg) / sqrt(dh)`` on every key, and is fused again in the
feed-forward head.

Training minimises ``lambda_cross * L_cross + lambda_self * L_self`` where each
reconstruction term is the mean over frames of the squared L2 error over the
33 coefficients. Cross pairs are DTW-aligned to their ground truth first.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._io import Reader, Writer, rng_for
from .dtw_align import FeatureSequence, dtw, warp_array

N_COEFFS = 33
PARAM_NAMES = ("Wc1", "bc1", "Wc2", "bc2", "We1", "be1", "We2", "be2",
               "Wq", "Wk", "Wv", "Wg", "Wo", "bo", "W1", "Wf", "b1", "W2", "b2")


# -- synthetic corpus ----------------------------------------------------------

@dataclass(eq=False)
class DisentangledSample:
    content_id: int
    emotion_id: int
    audio_features: FeatureSequence
    blendshapes: np.ndarray          # (T, 33)

    def __post_init__(self):
        if not isinstance(self.audio_features, FeatureSequence):
            self.audio_features = FeatureSequence(self.audio_features)
        self.blendshapes = np.asarray(self.blendshapes, dtype=float)
        if len(self.audio_features) != len(self.blendshapes):
            raise ValueError("features and blendshapes must share the frame count")

    @property
    def features(self) -> np.ndarray:
        return self.audio_features.frames

    def __len__(self):
        return len(self.blendshapes)


class SyntheticCorpus:
    """Closed-form generator of (content, emotion) -> (features, blendshapes).

    Content ``c`` is a latent trajectory ``u_c(tau)``, tau in [0, 1]; emotion
    ``e`` has a per-coefficient gain and offset, a feature-space embedding and
    a tempo factor. Blendshapes are ``sigmoid(gain_e * (M u_c(tau)) + offset_e)``
    and features are ``P u_c(tau) + z_e``.
    """

    def __init__(self, seed=0, n_contents=4, n_emotions=3, T_range=(16, 28), feature_dim=16,
                 latent_dim=6, frame_rate=30.0):
        if n_contents < 2 or n_emotions < 2:
            raise ValueError("need at least 2 contents and 2 emotions")
        lo, hi = T_range
        if not 2 <= lo <= hi:
            raise ValueError(f"degenerate T_range {T_range}")
        if feature_dim < 1 or latent_dim < 1:
            raise ValueError("dimensions must be >= 1")
        self.seed, self.n_contents, self.n_emotions = seed, n_contents, n_emotions
        self.T_range, self.feature_dim, self.frame_rate = (lo, hi), feature_dim, frame_rate
        rng = rng_for(seed, 10)
        q = latent_dim
        self.mix = rng.normal(0, 1.0 / np.sqrt(q), size=(N_COEFFS, q))
        self.feat_mix = rng.normal(0, 1.0, size=(feature_dim, q))
        self.freqs = rng.uniform(0.5, 2.5, size=(n_contents, q))
        self.phases = rng.uniform(0, 2 * np.pi, size=(n_contents, q))
        self.amps = rng.uniform(0.8, 1.6, size=(n_contents, q))
        self.base_len = rng.integers(lo, hi + 1, size=n_contents)
        self.gain = rng.uniform(0.6, 1.6, size=(n_emotions, N_COEFFS))
        self.offset = rng.normal(0, 0.7, size=(n_emotions, N_COEFFS))
        self.embed = rng.normal(0, 1.0, size=(n_emotions, feature_dim))
        self.tempo = np.concatenate([[1.0], rng.uniform(0.7, 1.35, size=n_emotions - 1)])

    def length(self, c: int, e: int) -> int:
        return max(2, int(round(self.base_len[c] * self.tempo[e])))

    def content_curve(self, c: int, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)[:, None]
        return self.amps[c] * np.sin(2 * np.pi * self.freqs[c] * tau + self.phases[c])

    def render_blendshapes(self, c: int, e: int, n_frames: int | None = None) -> np.ndarray:
        n = self.length(c, e) if n_frames is None else n_frames
        u = self.content_curve(c, np.linspace(0.0, 1.0, n))
        return 1.0 / (1.0 + np.exp(-(self.gain[e] * (u @ self.mix.T) + self.offset[e])))

    def render_features(self, c: int, e: int, n_frames: int | None = None) -> np.ndarray:
        n = self.length(c, e) if n_frames is None else n_frames
        u = self.content_curve(c, np.linspace(0.0, 1.0, n))
        return u @ self.feat_mix.T + self.embed[e]

    def sample(self, c: int, e: int) -> DisentangledSample:
        return DisentangledSample(
            c, e, FeatureSequence(self.render_features(c, e), self.frame_rate),
            self.render_blendshapes(c, e),
        )

    def samples(self) -> list[DisentangledSample]:
        return [self.sample(c, e) for c in range(self.n_contents) for e in range(self.n_emotions)]


def synth_corpus(seed: int, n_contents: int = 4, n_emotions: int = 3,
                 T_range=(16, 28), **kw) -> list[DisentangledSample]:
    return SyntheticCorpus(seed, n_contents, n_emotions, T_range, **kw).samples()


# -- losses --------------------------------------------------------------------

def reconstruction_error(pred, gt) -> float:
    """Mean over frames of the squared L2 error across coefficients."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch after alignment: {pred.shape} vs {gt.shape}")
    return float(((pred - gt) ** 2).sum() / len(gt))


def _feats(x):
    if isinstance(x, DisentangledSample):
        return x.features
    if isinstance(x, FeatureSequence):
        return x.frames
    return np.asarray(x, dtype=float)


def _blend(x):
    return x.blendshapes if isinstance(x, DisentangledSample) else np.asarray(x, dtype=float)


def cross_reconstruction_loss(model, sample_12, sample_21, gt_11, gt_22) -> float:
    """``sample_12`` must already be aligned to ``gt_11``, ``sample_21`` to ``gt_22``."""
    a12, a21 = _feats(sample_12), _feats(sample_21)
    return (reconstruction_error(model.decode(a12, a21), _blend(gt_11))
            + reconstruction_error(model.decode(a21, a12), _blend(gt_22)))


def self_reconstruction_loss(model, sample, gt=None) -> float:
    a = _feats(sample)
    return reconstruction_error(model.decode(a, a), _blend(sample if gt is None else gt))


@dataclass(eq=False)
class CrossQuad:
    """One training item: cross pair aligned to its ground truths, plus a self term."""
    a12: np.ndarray      # content of (c1, e2) warped onto (c1, e1)
    a21: np.ndarray      # content of (c2, e1) warped onto (c2, e2)
    gt11: np.ndarray
    gt22: np.ndarray
    self_feats: np.ndarray
    self_gt: np.ndarray


def total_loss(model, batch, lambda_cross=None, lambda_self=None) -> float:
    """Mean over batch items of ``lambda_cross * L_cross + lambda_self * L_self``."""
    lc = model.lambda_cross if lambda_cross is None else lambda_cross
    ls = model.lambda_self if lambda_self is None else lambda_self
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    out = 0.0
    for q in batch:
        cross = cross_reconstruction_loss(model, q.a12, q.a21, q.gt11, q.gt22)
        own = reconstruction_error(model.decode(q.self_feats, q.self_feats), q.self_gt)
        out += lc * cross + ls * own
    return out / len(batch)


def build_quads(corpus, exclude=()) -> list[CrossQuad]:
    """All (c1 != c2, e1 != e2) cross items whose four cells are available.

    ``exclude`` lists (content, emotion) cells held out from training.
    """
    cells = {(s.content_id, s.emotion_id): s for s in corpus}
    for cell in exclude:
        cells.pop(tuple(cell), None)
    contents = sorted({c for c, _ in cells})
    emotions = sorted({e for _, e in cells})
    paths = {}

    def aligned(c, e_src, e_ref):
        key = (c, e_src, e_ref)
        if key not in paths:
            src, ref = cells[(c, e_src)], cells[(c, e_ref)]
            path = dtw(src.audio_features, ref.audio_features)
            paths[key] = (warp_array(src.features, path, "a"), warp_array(ref.blendshapes, path, "b"))
        return paths[key]

    quads = []
    for c1, c2 in itertools.permutations(contents, 2):
        for e1, e2 in itertools.permutations(emotions, 2):
            need = [(c1, e2), (c2, e1), (c1, e1), (c2, e2)]
            if not all(k in cells for k in need):
                continue
            a12, gt11 = aligned(c1, e2, e1)
            a21, gt22 = aligned(c2, e1, e2)
            s = cells[(c1, e2)]
            quads.append(CrossQuad(a12, a21, gt11, gt22, s.features, s.blendshapes))
    if not quads:
        raise ValueError("corpus has no complete (content, emotion) quadruple for cross training")
    return quads


# -- network -------------------------------------------------------------------

def positional_encoding(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def init_params(rng, feature_dim, d_model=64, n_heads=2, enc_hidden=64, ffn=64) -> dict:
    if d_model % n_heads:
        raise ValueError("d_model must be divisible by n_heads")

    def u(fan_in, shape):
        b = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    D, d, h, f = feature_dim, d_model, enc_hidden, ffn
    return {
        "Wc1": u(D, (D, h)), "bc1": np.zeros(h), "Wc2": u(h, (h, d)), "bc2": np.zeros(d),
        "We1": u(D, (D, h)), "be1": np.zeros(h), "We2": u(h, (h, d)), "be2": np.zeros(d),
        "Wq": u(d, (d, d)), "Wk": u(d, (d, d)), "Wv": u(d, (d, d)), "Wg": u(d, (d, d)),
        "Wo": u(d, (d, d)), "bo": np.zeros(d),
        "W1": u(d, (d, f)), "Wf": u(d, (d, f)), "b1": np.zeros(f),
        "W2": u(f, (f, N_COEFFS)), "b2": np.zeros(N_COEFFS),
    }


def decoder_forward(p, n_heads, a_content, a_emotion):
    T = len(a_content)
    d = p["Wq"].shape[0]
    dh = d // n_heads
    hc = np.tanh(a_content @ p["Wc1"] + p["bc1"])
    C = hc @ p["Wc2"] + p["bc2"]
    he = np.tanh(a_emotion @ p["We1"] + p["be1"])
    ebar = he.mean(axis=0)
    e = ebar @ p["We2"] + p["be2"]
    X = C + positional_encoding(T, d)
    Q, K, V = X @ p["Wq"], X @ p["Wk"], X @ p["Wv"]
    g = e @ p["Wg"]
    O = np.empty_like(X)
    probs = []
    for k in range(n_heads):
        sl = slice(k * dh, (k + 1) * dh)
        Qk = Q[:, sl] + g[sl]
        P = _softmax(Qk @ K[:, sl].T / np.sqrt(dh))
        O[:, sl] = P @ V[:, sl]
        probs.append((P, Qk))
    H = X + O @ p["Wo"] + p["bo"]
    F = np.tanh(H @ p["W1"] + e @ p["Wf"] + p["b1"])
    Y = 1.0 / (1.0 + np.exp(-(F @ p["W2"] + p["b2"])))
    cache = dict(a_content=a_content, a_emotion=a_emotion, hc=hc, he=he, ebar=ebar, e=e, X=X,
                 K=K, V=V, O=O, probs=probs, H=H, F=F, Y=Y, dh=dh, n_heads=n_heads)
    return Y, cache


def decoder_backward(p, cache, dY) -> dict:
    c = cache
    dh, n_heads = c["dh"], c["n_heads"]
    g = {}
    Y, F, H, X, e = c["Y"], c["F"], c["H"], c["X"], c["e"]
    dZ2 = dY * Y * (1.0 - Y)
    g["W2"] = F.T @ dZ2
    g["b2"] = dZ2.sum(axis=0)
    dZ1 = (dZ2 @ p["W2"].T) * (1.0 - F ** 2)
    sum_dZ1 = dZ1.sum(axis=0)
    g["W1"] = H.T @ dZ1
    g["Wf"] = np.outer(e, sum_dZ1)
    g["b1"] = sum_dZ1
    de = p["Wf"] @ sum_dZ1
    dH = dZ1 @ p["W1"].T
    dX = dH.copy()
    g["Wo"] = c["O"].T @ dH
    g["bo"] = dH.sum(axis=0)
    dO = dH @ p["Wo"].T

    K, V = c["K"], c["V"]
    dQ, dK, dV = np.zeros_like(K), np.zeros_like(K), np.zeros_like(V)
    for k, (P, Qk) in enumerate(c["probs"]):
        sl = slice(k * dh, (k + 1) * dh)
        dP = dO[:, sl] @ V[:, sl].T
        dV[:, sl] = P.T @ dO[:, sl]
        dL = P * (dP - (dP * P).sum(axis=1, keepdims=True)) / np.sqrt(dh)
        dQ[:, sl] = dL @ K[:, sl]
        dK[:, sl] = dL.T @ Qk
    dg = dQ.sum(axis=0)
    g["Wq"] = X.T @ dQ
    g["Wk"] = X.T @ dK
    g["Wv"] = X.T @ dV
    g["Wg"] = np.outer(e, dg)
    de += p["Wg"] @ dg
    dX += dQ @ p["Wq"].T + dK @ p["Wk"].T + dV @ p["Wv"].T

    hc = c["hc"]
    g["Wc2"] = hc.T @ dX
    g["bc2"] = dX.sum(axis=0)
    dzc = (dX @ p["Wc2"].T) * (1.0 - hc ** 2)
    g["Wc1"] = c["a_content"].T @ dzc
    g["bc1"] = dzc.sum(axis=0)

    he = c["he"]
    g["We2"] = np.outer(c["ebar"], de)
    g["be2"] = de
    dze = np.broadcast_to(p["We2"] @ de / len(he), he.shape) * (1.0 - he ** 2)
    g["We1"] = c["a_emotion"].T @ dze
    g["be1"] = dze.sum(axis=0)
    return g


class EmotionDecoder(BaseEstimator):
    """Disentangling blendshape decoder trained on a list of DisentangledSample.

    ``holdout`` lists (content, emotion) cells kept out of training; they form
    the validation split.
    """

    def __init__(self, d_model=64, n_heads=2, enc_hidden=64, ffn=64, lambda_cross=1.0,
                 lambda_self=1.0, epochs=150, learning_rate=3e-3, batch_size=4, seed=0,
                 holdout=()):
        self.d_model = d_model
        self.n_heads = n_heads
        self.enc_hidden = enc_hidden
        self.ffn = ffn
        self.lambda_cross = lambda_cross
        self.lambda_self = lambda_self
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.holdout = holdout

    # -- model surface used by the loss functions ------------------------------

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("EmotionDecoder is not fitted")

    def decode(self, content_features, emotion_features) -> np.ndarray:
        self._check_fitted()
        y, _ = decoder_forward(self.params_, self.n_heads, _feats(content_features),
                               _feats(emotion_features))
        return y

    def predict(self, features) -> np.ndarray:
        """Blendshapes (T, 33) in [0, 1] for one feature sequence."""
        a = _feats(features)
        if a.ndim != 2 or a.shape[1] != self.params_["Wc1"].shape[0]:
            raise ValueError("feature dimension does not match the trained model")
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite features")
        return self.decode(a, a)

    # -- training ----------------------------------------------------------------

    def init(self, feature_dim: int) -> "EmotionDecoder":
        self.params_ = init_params(rng_for(self.seed, 20), feature_dim, self.d_model,
                                   self.n_heads, self.enc_hidden, self.ffn)
        return self

    def loss_and_grad(self, batch):
        """total_loss over ``batch`` and its gradient for every parameter."""
        self._check_fitted()
        p, nh = self.params_, self.n_heads
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        loss = 0.0

        def term(content, emotion, gt, weight):
            y, cache = decoder_forward(p, nh, content, emotion)
            diff = y - gt
            if diff.shape != gt.shape:
                raise ValueError("length mismatch after alignment")
            for k, v in decoder_backward(p, cache, 2.0 * weight * diff / len(gt)).items():
                grads[k] += v
            return weight * float((diff ** 2).sum() / len(gt))

        w = 1.0 / len(batch)
        for q in batch:
            loss += term(q.a12, q.a21, q.gt11, w * self.lambda_cross)
            loss += term(q.a21, q.a12, q.gt22, w * self.lambda_cross)
            loss += term(q.self_feats, q.self_feats, q.self_gt, w * self.lambda_self)
        return loss, grads

    def fit(self, corpus, y=None):
        corpus = list(corpus)
        if len({s.content_id for s in corpus}) < 2 or len({s.emotion_id for s in corpus}) < 2:
            raise ValueError("corpus must cover at least 2 contents x 2 emotions")
        quads = build_quads(corpus, exclude=self.holdout)
        self.init(corpus[0].features.shape[1])
        names = list(self.params_)
        m = {k: np.zeros_like(v) for k, v in self.params_.items()}
        v = {k: np.zeros_like(x) for k, x in self.params_.items()}
        b1, b2, eps, t = 0.9, 0.999, 1e-8, 0
        self.initial_loss_ = total_loss(self, quads)
        self.history_ = []
        for epoch in range(self.epochs):
            order = rng_for(self.seed, 21, epoch).permutation(len(quads))
            for start in range(0, len(quads), self.batch_size):
                _, grads = self.loss_and_grad([quads[i] for i in order[start:start + self.batch_size]])
                t += 1
                lr = self.learning_rate * min(1.0, 0.5 * (1 + np.cos(np.pi * epoch / max(1, self.epochs))) + 0.05)
                for k in names:
                    m[k] = b1 * m[k] + (1 - b1) * grads[k]
                    v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
                    self.params_[k] -= lr * (m[k] / (1 - b1 ** t)) / (np.sqrt(v[k] / (1 - b2 ** t)) + eps)
            self.history_.append(total_loss(self, quads))
        self.final_loss_ = self.history_[-1] if self.history_ else self.initial_loss_
        self.n_quads_ = len(quads)
        return self

    # -- persistence ---------------------------------------------------------------

    def to_bytes(self) -> bytes:
        self._check_fitted()
        w = Writer(b"EDEC")
        params = self.get_params()
        params["holdout"] = [list(c) for c in self.holdout]
        w.text(json.dumps(params))
        for k in PARAM_NAMES:
            w.array(self.params_[k])
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmotionDecoder":
        r = Reader(data, b"EDEC")
        params = json.loads(r.text())
        params["holdout"] = tuple(tuple(c) for c in params["holdout"])
        model = cls(**params)
        model.params_ = {k: r.array() for k in PARAM_NAMES}
        r.done()
        return model

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EmotionDecoder":
        return cls.from_bytes(Path(path).read_bytes())


def train_decoder(corpus, config: dict | None = None) -> EmotionDecoder:
    return EmotionDecoder(**(config or {})).fit(corpus)


def infer_blendshapes(model: EmotionDecoder, features) -> np.ndarray:
    return model.predict(features)


# -- corpus container --------------------------------------------------------------

def corpus_to_bytes(corpus) -> bytes:
    w = Writer(b"CORP")
    corpus = list(corpus)
    w.u32(len(corpus))
    for s in corpus:
        w.u32(s.content_id)
        w.u32(s.emotion_id)
        w.f64(s.audio_features.frame_rate)
        w.array(s.features)
        w.array(s.blendshapes)
    return w.getvalue()


def corpus_from_bytes(data: bytes) -> list[DisentangledSample]:
    r = Reader(data, b"CORP")
    out = []
    for _ in range(r.u32()):
        c, e, rate = r.u32(), r.u32(), r.f64()
        feats, blend = r.array(), r.array()
        out.append(DisentangledSample(c, e, FeatureSequence(feats, rate), blend))
    r.done()
    return out
