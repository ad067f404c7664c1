"""Shared-weights recurrent high-level controller with closed-form gradients.

Architecture: one LSTM layer (hidden size H) over the daily observation of a
region, followed by three two-layer tanh perceptron heads: a categorical
head for the number of stations to open, one for the number to close, and a
scalar state-value head.
"""
from __future__ import annotations

import json
import logging
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"EMOBCKPT"
VERSION = 1
HEADS = ("add", "rem", "val")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class PolicyParams:
    """Weights of the high-level network plus everything needed to rebuild observations."""

    weights: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def obs_dim(self) -> int:
        return self.weights["Wx"].shape[0]

    @property
    def hidden(self) -> int:
        return self.weights["Wh"].shape[0]

    @property
    def levels(self) -> int:
        return self.weights["add_W2"].shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.weights.items()}, json.loads(json.dumps(self.meta)))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in sorted(self.weights)])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k in sorted(self.weights):
            n = self.weights[k].size
            self.weights[k] = vec[i:i + n].reshape(self.weights[k].shape).copy()
            i += n

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.weights.values())

    # binary checkpoint: magic, version, header length, JSON header, float64 payload
    def to_bytes(self) -> bytes:
        names = sorted(self.weights)
        header = {"meta": self.meta, "arrays": [[k, list(self.weights[k].shape)] for k in names]}
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        payload = b"".join(np.ascontiguousarray(self.weights[k], dtype="<f8").tobytes() for k in names)
        return MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "PolicyParams":
        if data[:8] != MAGIC:
            raise ValueError("not a policy checkpoint")
        version, hlen = struct.unpack("<II", data[8:16])
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(data[16:16 + hlen])
        off = 16 + hlen
        weights = {}
        for k, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            weights[k] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
            off += 8 * n
        return cls(weights, header["meta"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PolicyParams":
        return cls.from_bytes(Path(path).read_bytes())


def init_params(obs_dim: int, levels: int, hidden: int = 64, head_hidden: int = 64, seed: int = 0,
                meta: dict | None = None) -> PolicyParams:
    rng = np.random.default_rng(seed)
    H, K = hidden, head_hidden
    w = {
        "Wx": rng.normal(0, 1.0 / np.sqrt(obs_dim), (obs_dim, 4 * H)),
        "Wh": rng.normal(0, 1.0 / np.sqrt(H), (H, 4 * H)),
        "b": np.zeros(4 * H),
    }
    w["b"][H:2 * H] = 1.0  # forget gate bias
    for name, out, gain in (("add", levels, 0.01), ("rem", levels, 0.01), ("val", 1, 1.0)):
        w[f"{name}_W1"] = rng.normal(0, 1.0 / np.sqrt(H), (H, K))
        w[f"{name}_b1"] = np.zeros(K)
        w[f"{name}_W2"] = rng.normal(0, gain / np.sqrt(K), (K, out))
        w[f"{name}_b2"] = np.zeros(out)
    return PolicyParams(w, dict(meta or {}))


def zero_hidden(batch: int, hidden: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros((batch, hidden)), np.zeros((batch, hidden))


def _lstm_cell(w, x, h, c):
    H = h.shape[1]
    a = x @ w["Wx"] + h @ w["Wh"] + w["b"]
    i = _sigmoid(a[:, :H])
    f = _sigmoid(a[:, H:2 * H])
    g = np.tanh(a[:, 2 * H:3 * H])
    o = _sigmoid(a[:, 3 * H:])
    c2 = f * c + i * g
    tc = np.tanh(c2)
    return o * tc, c2, (i, f, g, o, tc)


def _heads(w, h):
    out, cache = {}, {}
    for name in HEADS:
        z = np.tanh(h @ w[f"{name}_W1"] + w[f"{name}_b1"])
        out[name] = z @ w[f"{name}_W2"] + w[f"{name}_b2"]
        cache[name] = z
    return out, cache


def _dump_and_fail(params: PolicyParams, what: str):
    fd = tempfile.NamedTemporaryFile(prefix="emobsim-nan-", suffix=".ckpt", delete=False)
    fd.write(params.to_bytes())
    fd.close()
    raise FloatingPointError(f"non-finite {what}; parameters dumped to {fd.name}")


@dataclass
class StepOutput:
    p_add: np.ndarray
    p_rem: np.ndarray
    value: np.ndarray
    hidden: tuple[np.ndarray, np.ndarray]


def high_level_step(params: PolicyParams, obs: np.ndarray, hidden=None) -> StepOutput:
    """One recurrent step for a batch of region observations (rows)."""
    w = params.weights
    x = np.atleast_2d(obs)
    if x.shape[1] != params.obs_dim:
        raise ValueError(f"observation dim {x.shape[1]} != policy input dim {params.obs_dim}")
    if hidden is None:
        hidden = zero_hidden(len(x), params.hidden)
    h, c, _ = _lstm_cell(w, x, *hidden)
    out, _ = _heads(w, h)
    if not (np.isfinite(out["add"]).all() and np.isfinite(out["rem"]).all()):
        _dump_and_fail(params, "logits")
    p_add = np.exp(_log_softmax(out["add"]))
    p_rem = np.exp(_log_softmax(out["rem"]))
    return StepOutput(p_add, p_rem, out["val"][:, 0], (h, c))


def sample_levels(step: StepOutput, rng: np.random.Generator, greedy: bool = False):
    """Sample (add, remove) levels per row; returns levels and joint log-probabilities."""
    if greedy:
        a = step.p_add.argmax(1)
        r = step.p_rem.argmax(1)
    else:
        a = np.array([rng.choice(len(p), p=p / p.sum()) for p in step.p_add])
        r = np.array([rng.choice(len(p), p=p / p.sum()) for p in step.p_rem])
    idx = np.arange(len(a))
    logp = np.log(step.p_add[idx, a]) + np.log(step.p_rem[idx, r])
    return a, r, logp


def forward_sequence(params: PolicyParams, X: np.ndarray):
    """Run the network over X of shape (T, B, D) from zero state."""
    w = params.weights
    T, B, _ = X.shape
    h, c = zero_hidden(B, params.hidden)
    caches, outs = [], []
    for t in range(T):
        h_prev, c_prev = h, c
        h, c, gates = _lstm_cell(w, X[t], h_prev, c_prev)
        out, hc = _heads(w, h)
        caches.append((h_prev, c_prev, gates, h, hc))
        outs.append(out)
    logits_add = np.stack([o["add"] for o in outs])
    logits_rem = np.stack([o["rem"] for o in outs])
    values = np.stack([o["val"][:, 0] for o in outs])
    return logits_add, logits_rem, values, caches


@dataclass
class PPOBatch:
    X: np.ndarray  # (T, B, D)
    a_add: np.ndarray  # (T, B) int
    a_rem: np.ndarray
    logp_old: np.ndarray  # (T, B)
    adv: np.ndarray
    ret: np.ndarray
    mask: np.ndarray | None = None

    def select(self, cols) -> "PPOBatch":
        return PPOBatch(self.X[:, cols], self.a_add[:, cols], self.a_rem[:, cols], self.logp_old[:, cols],
                        self.adv[:, cols], self.ret[:, cols], None if self.mask is None else self.mask[:, cols])


def ppo_loss(params: PolicyParams, batch: PPOBatch, clip: float = 0.2, vf_coef: float = 0.5,
             ent_coef: float = 0.01, need_grad: bool = True):
    """Clipped-surrogate PPO loss (to minimize) and its exact gradient by BPTT.

    loss = -mean(min(rho*A, clip(rho)*A)) + vf_coef*mean((V-R)^2) - ent_coef*mean(H_add + H_rem)
    """
    w = params.weights
    la, lr_, V, caches = forward_sequence(params, batch.X)
    T, B = batch.a_add.shape
    mask = np.ones((T, B)) if batch.mask is None else batch.mask.astype(float)
    n = max(mask.sum(), 1.0)
    lpa, lpr = _log_softmax(la), _log_softmax(lr_)
    pa, pr = np.exp(lpa), np.exp(lpr)
    ti, bi = np.meshgrid(np.arange(T), np.arange(B), indexing="ij")
    logp = lpa[ti, bi, batch.a_add] + lpr[ti, bi, batch.a_rem]
    ratio = np.exp(logp - batch.logp_old)
    A = batch.adv
    s1 = ratio * A
    s2 = np.clip(ratio, 1 - clip, 1 + clip) * A
    surr = np.minimum(s1, s2)
    ent_a = -(pa * lpa).sum(-1)
    ent_r = -(pr * lpr).sum(-1)
    v_err = V - batch.ret
    pol_loss = -(surr * mask).sum() / n
    v_loss = (v_err ** 2 * mask).sum() / n
    ent = ((ent_a + ent_r) * mask).sum() / n
    loss = pol_loss + vf_coef * v_loss - ent_coef * ent
    stats = {
        "loss": float(loss), "policy_loss": float(pol_loss), "value_loss": float(v_loss),
        "entropy": float(ent), "clip_frac": float(((np.abs(ratio - 1) > clip) * mask).sum() / n),
        "approx_kl": float(((batch.logp_old - logp) * mask).sum() / n),
        "ratio_mean": float((ratio * mask).sum() / n),
    }
    if not need_grad:
        return loss, None, stats

    # d loss / d logp
    unclipped = s1 <= s2
    dlogp = -np.where(unclipped, s1, 0.0) * mask / n
    L = la.shape[-1]
    oh_a = np.eye(L)[batch.a_add]
    oh_r = np.eye(L)[batch.a_rem]
    d_la = dlogp[..., None] * (oh_a - pa)
    d_lr = dlogp[..., None] * (oh_r - pr)
    # entropy: dH/dz = -p (log p + H)
    d_la += ent_coef * (mask / n)[..., None] * pa * (lpa + ent_a[..., None])
    d_lr += ent_coef * (mask / n)[..., None] * pr * (lpr + ent_r[..., None])
    d_v = vf_coef * 2.0 * v_err * mask / n

    g = {k: np.zeros_like(v) for k, v in w.items()}
    H = params.hidden
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T)):
        h_prev, c_prev, (i, f, gg, o, tc), h, hc = caches[t]
        dh = dh_next.copy()
        for name, dout in (("add", d_la[t]), ("rem", d_lr[t]), ("val", d_v[t][:, None])):
            z = hc[name]
            g[f"{name}_W2"] += z.T @ dout
            g[f"{name}_b2"] += dout.sum(0)
            dz = dout @ w[f"{name}_W2"].T * (1 - z * z)
            g[f"{name}_W1"] += h.T @ dz
            g[f"{name}_b1"] += dz.sum(0)
            dh += dz @ w[f"{name}_W1"].T
        do = dh * tc
        dc = dh * o * (1 - tc * tc) + dc_next
        di = dc * gg
        dg = dc * i
        df = dc * c_prev
        da = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - gg * gg), do * o * (1 - o)], axis=1)
        g["Wx"] += batch.X[t].T @ da
        g["Wh"] += h_prev.T @ da
        g["b"] += da.sum(0)
        dh_next = da @ w["Wh"].T
        dc_next = dc * f
    return loss, g, stats


class Adam:
    def __init__(self, lr: float = 3e-4, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: PolicyParams, grads: dict) -> None:
        self.t += 1
        for k, gk in grads.items():
            m = self.m.setdefault(k, np.zeros_like(gk))
            v = self.v.setdefault(k, np.zeros_like(gk))
            m *= self.b1
            m += (1 - self.b1) * gk
            v *= self.b2
            v += (1 - self.b2) * gk * gk
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            params.weights[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm
