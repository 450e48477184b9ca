"""Liquid attention: logits evolved by a gated linear ODE.

Each query-key pair carries a scalar logit state a integrated by explicit
Euler over a unit refinement horizon, da/dt = -f_tau * a + f_phi. The two
gates come from projection heads over a shared recurrent cell driven by
the pair input u = [q; k] and the step time. f_tau > 0 sets the
convergence rate (its reciprocal is the effective time constant) and
f_phi in (-1, 1) the content target. The step size is clamped so
dt * f_tau <= 1 for every pair, which keeps every update a convex
combination of the current state and the instantaneous target f_phi/f_tau
and therefore keeps trajectories inside the equilibrium envelope.

Final logits pass through a masked softmax and weight the gathered
values; heads are concatenated and projected, optionally through a
query-dependent sigmoid output gate that counteracts attention sinks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from fluid import pairs as pairs_mod
from fluid import tensor as T
from fluid.tensor import Tensor, uniform_init, zeros_param


@dataclass
class LanConfig:
    """Hyperparameters of one liquid-attention block."""

    d_model: int
    heads: int = 4
    euler_steps: int = 5
    top_k: int | None = None        # None means full pairwise
    epsilon: float = 1e-3
    sink_gate_enabled: bool = True
    causal: bool = False

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by "
                             f"{self.heads} heads")
        if self.euler_steps < 1:
            raise ValueError("euler_steps must be >= 1")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1 or None")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def dt_nominal(self) -> float:
        return 1.0 / self.euler_steps


@dataclass
class LogitTrajectory:
    """Recorded logit states and gate values across the Euler steps.

    a: [..., N+1] with a[..., 0] == 0; f_tau, f_phi: [..., N];
    dt_effective is the single clamped step used for the whole pass.
    """

    a: np.ndarray
    f_tau: np.ndarray
    f_phi: np.ndarray
    dt_effective: float
    dt_nominal: float

    def to_csv(self, path):
        """Diagnostic dump, one row per (step, pair)."""
        n_steps = self.f_tau.shape[-1]
        a2 = self.a.reshape(-1, n_steps + 1)
        tau2 = self.f_tau.reshape(-1, n_steps)
        phi2 = self.f_phi.reshape(-1, n_steps)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "pair_id", "a", "f_tau", "f_phi"])
            for pid in range(a2.shape[0]):
                w.writerow([0, pid, a2[pid, 0], "", ""])
                for n in range(n_steps):
                    w.writerow([n + 1, pid, a2[pid, n + 1],
                                tau2[pid, n], phi2[pid, n]])


# --------------------------------------------------------------------------
# gate cores
# --------------------------------------------------------------------------

class RecurrentGateCore:
    """GRU over the refinement axis with tanh/softplus projection heads.

    Hidden size equals the per-head dimension; the hidden state is carried
    across Euler steps, independently per pair, starting from zero. The
    step input is [u; t_n] with t_n = n * dt_nominal.

    With ``heads=None`` the weights are plain matrices and the core serves
    a single head on inputs [..., 2D]. With ``heads=H`` the weights carry
    a head axis broadcast against rank-5 pair batches [B,H,T_q,K,2D], so
    all heads run in one pass.
    """

    def __init__(self, pair_dim: int, hidden_dim: int, epsilon: float,
                 rng: np.random.Generator, heads: int | None = None):
        h = hidden_dim
        in_dim = pair_dim + 1  # the step time rides along with u
        self.hidden_dim = h
        self.heads = heads
        self.epsilon = float(epsilon)
        pre = () if heads is None else (1, heads, 1)
        vec = () if heads is None else (1, heads, 1, 1)
        self.W_u = uniform_init(rng, pre + (pair_dim, 3 * h), in_dim)
        self.w_t = uniform_init(rng, vec + (3 * h,), in_dim)
        self.b_x = uniform_init(rng, vec + (3 * h,), in_dim)
        self.W_h = uniform_init(rng, pre + (h, 3 * h), h)
        self.W_phi = uniform_init(rng, pre + (h, 1), h)
        self.b_phi = uniform_init(rng, vec + (1,), h)
        self.W_tau = uniform_init(rng, pre + (h, 1), h)
        self.b_tau = uniform_init(rng, vec + (1,), h)

    def parameters(self) -> dict:
        return {"W_u": self.W_u, "w_t": self.w_t, "b_x": self.b_x,
                "W_h": self.W_h,
                "W_phi": self.W_phi, "b_phi": self.b_phi,
                "W_tau": self.W_tau, "b_tau": self.b_tau}

    def slice_head(self, h: int) -> "RecurrentGateCore":
        """Single-head view of a stacked core (copies the slices)."""
        if self.heads is None:
            raise ValueError("core is already single-head")
        clone = object.__new__(RecurrentGateCore)
        clone.hidden_dim = self.hidden_dim
        clone.heads = None
        clone.epsilon = self.epsilon
        for name in ("W_u", "W_h", "W_phi", "W_tau"):
            clone.__dict__[name] = Tensor(getattr(self, name).data[0, h, 0])
        for name in ("w_t", "b_x", "b_phi", "b_tau"):
            clone.__dict__[name] = Tensor(getattr(self, name).data[0, h, 0, 0])
        return clone

    def _cell(self, x_proj: Tensor, hidden: Tensor | None) -> Tensor:
        # single-bias GRU: the reset gate scales the raw hidden projection,
        # so a zero hidden state needs no projection at all
        h = self.hidden_dim
        xr, xz, xn = (T.narrow(x_proj, -1, i * h, h) for i in range(3))
        if hidden is None:
            z = T.sigmoid(xz)
            n = T.tanh(xn)
            return T.mul(T.sub(Tensor(1.0), z), n)
        hp = T.matmul(hidden, self.W_h)
        hr, hz, hn = (T.narrow(hp, -1, i * h, h) for i in range(3))
        r = T.sigmoid(T.add(xr, hr))
        z = T.sigmoid(T.add(xz, hz))
        n = T.tanh(T.add(xn, T.mul(r, hn)))
        return T.add(T.mul(T.sub(Tensor(1.0), z), n), T.mul(z, hidden))

    def _heads(self, hidden: Tensor) -> tuple[Tensor, Tensor]:
        f_phi = T.tanh(T.add(T.matmul(hidden, self.W_phi), self.b_phi))
        f_tau = T.add(T.softplus(T.add(T.matmul(hidden, self.W_tau), self.b_tau)),
                      Tensor(self.epsilon))
        return f_tau, f_phi

    def step(self, u: Tensor, t_n: float, hidden: Tensor | None,
             u_proj: Tensor | None = None):
        """One recurrent step; returns (f_tau, f_phi, new hidden)."""
        if u_proj is None:
            u_proj = T.matmul(u, self.W_u)
        # fold the time term and bias into one small vector before the
        # single wide broadcast add
        step_bias = T.add(T.scale(self.w_t, t_n), self.b_x)
        x_proj = T.add(u_proj, step_bias)
        new_hidden = self._cell(x_proj, hidden)
        f_tau, f_phi = self._heads(new_hidden)
        return f_tau, f_phi, new_hidden

    def unroll(self, u: Tensor, n_steps: int, dt_nominal: float):
        """Gate trajectories for all steps; the u projection is shared.

        Outside the tape the scratch-buffer path below is used; it runs the
        same formulas with preallocated buffers (several times faster on
        large pair batches, identical values).
        """
        if not T._grad_enabled():
            return self._unroll_inference(u.data, n_steps, dt_nominal)
        u_proj = T.matmul(u, self.W_u)
        hidden = None
        f_taus, f_phis = [], []
        for n in range(n_steps):
            f_tau, f_phi, hidden = self.step(u, n * dt_nominal, hidden,
                                             u_proj=u_proj)
            f_taus.append(f_tau)
            f_phis.append(f_phi)
        return f_taus, f_phis

    def _unroll_inference(self, u_np: np.ndarray, n_steps: int,
                          dt_nominal: float):
        if self.heads is None:
            weights = {k: v.data for k, v in self.parameters().items()}
            return self._unroll_inference_flat(u_np, n_steps, dt_nominal,
                                               weights)
        # stacked core: loop heads to bound scratch memory, assembling the
        # full [B,H,...] gate arrays per step
        out_tau = [np.empty(u_np.shape[:-1] + (1,)) for _ in range(n_steps)]
        out_phi = [np.empty(u_np.shape[:-1] + (1,)) for _ in range(n_steps)]
        _owners = [Tensor(a) for a in out_tau + out_phi]
        for hidx in range(self.heads):
            weights = {}
            for name in ("W_u", "W_h", "W_phi", "W_tau"):
                weights[name] = getattr(self, name).data[0, hidx, 0]
            for name in ("w_t", "b_x", "b_phi", "b_tau"):
                weights[name] = getattr(self, name).data[0, hidx, 0, 0]
            taus, phis = self._unroll_inference_flat(
                u_np[:, hidx], n_steps, dt_nominal, weights)
            for n in range(n_steps):
                out_tau[n][:, hidx] = taus[n].data
                out_phi[n][:, hidx] = phis[n].data
        return ([Tensor(a) for a in out_tau], [Tensor(a) for a in out_phi])

    def _unroll_inference_flat(self, u_np: np.ndarray, n_steps: int,
                               dt_nominal: float, weights: dict):
        h = self.hidden_dim
        lead = u_np.shape[:-1]
        flat = np.ascontiguousarray(u_np.reshape(-1, u_np.shape[-1]))
        P = flat.shape[0]

        up = flat @ weights["W_u"]
        x = np.empty_like(up)
        hp = np.empty_like(up)
        r = np.empty((P, h))
        z = np.empty((P, h))
        cand = np.empty((P, h))
        tmp = np.empty((P, h))
        head_tmp = np.empty((P, 1))
        hidden = np.empty((P, h))
        # the scratch lives outside the tape; register it with the
        # allocation tracker so benchmark peaks stay honest
        _scratch_owners = [Tensor(a) for a in (up, x, hp, r, z, cand, tmp,
                                               head_tmp, hidden)]

        def sigmoid_into(src, out):
            np.negative(src, out=out)
            with np.errstate(over="ignore"):
                np.exp(out, out=out)
            np.add(1.0, out, out=out)
            np.divide(1.0, out, out=out)

        first = True
        f_taus, f_phis = [], []
        for n in range(n_steps):
            bias = weights["w_t"] * (n * dt_nominal) + weights["b_x"]
            np.add(up, bias, out=x)
            if first:
                sigmoid_into(x[:, h:2 * h], z)
                np.tanh(x[:, 2 * h:], out=cand)
                np.subtract(1.0, z, out=tmp)
                np.multiply(tmp, cand, out=hidden)
                first = False
            else:
                np.matmul(hidden, weights["W_h"], out=hp)
                np.add(x[:, :h], hp[:, :h], out=r)
                sigmoid_into(r, r)
                np.add(x[:, h:2 * h], hp[:, h:2 * h], out=z)
                sigmoid_into(z, z)
                np.multiply(r, hp[:, 2 * h:], out=cand)
                np.add(x[:, 2 * h:], cand, out=cand)
                np.tanh(cand, out=cand)
                np.subtract(1.0, z, out=tmp)
                np.multiply(tmp, cand, out=tmp)
                np.multiply(z, hidden, out=hidden)
                np.add(tmp, hidden, out=hidden)

            np.matmul(hidden, weights["W_phi"], out=head_tmp)
            np.add(head_tmp, weights["b_phi"], out=head_tmp)
            f_phi = np.tanh(head_tmp).reshape(lead + (1,))
            np.matmul(hidden, weights["W_tau"], out=head_tmp)
            np.add(head_tmp, weights["b_tau"], out=head_tmp)
            sp = np.maximum(head_tmp, 0.0) + np.log1p(np.exp(-np.abs(head_tmp)))
            f_tau = (sp + self.epsilon).reshape(lead + (1,))
            f_taus.append(Tensor(f_tau))
            f_phis.append(Tensor(f_phi))
        return f_taus, f_phis


class SdpaFrozenGates:
    """Gate freeze realizing the attention limit: f_tau = 1, f_phi = q.k/sqrt(d).

    With a single Euler step at the maximum stable size dt = 1/f_tau the
    logit lands exactly on f_phi/f_tau = q.k/sqrt(d). Gradients still flow
    into q and k through f_phi, so a model built with this core trains as
    a plain dot-product attention.
    """

    def __init__(self, head_dim: int):
        self.head_dim = head_dim
        self.inv_sqrt_d = 1.0 / np.sqrt(head_dim)

    def parameters(self) -> dict:
        return {}

    def unroll(self, u: Tensor, n_steps: int, dt_nominal: float):
        D = self.head_dim
        qh = T.narrow(u, -1, 0, D)
        kh = T.narrow(u, -1, D, D)
        f_phi = T.scale(T.tsum(T.mul(qh, kh), axis=-1, keepdims=True),
                        self.inv_sqrt_d)
        f_tau = Tensor(np.ones(f_phi.shape))
        return [f_tau] * n_steps, [f_phi] * n_steps


class FeedforwardGates:
    """CT-RNN limit gates: f_tau = 1/tau fixed, f_phi = tanh(W u + b)/tau.

    No recurrence; both gates are constant along the Euler axis because u
    does not change within a pass.
    """

    def __init__(self, tau: float, W_phi: Tensor, b_phi: Tensor):
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.tau = float(tau)
        self.W_phi = W_phi
        self.b_phi = b_phi

    def parameters(self) -> dict:
        return {"W_phi": self.W_phi, "b_phi": self.b_phi}

    def unroll(self, u: Tensor, n_steps: int, dt_nominal: float):
        # multiply-then-sum keeps the reduction order identical to the
        # straight-line leaky-integrator oracle, enabling exact comparison
        inv_tau = 1.0 / self.tau
        w = T.reshape(self.W_phi, (self.W_phi.shape[0],))
        pre = T.add(T.tsum(T.mul(u, w), axis=-1, keepdims=True), self.b_phi)
        f_phi = T.scale(T.tanh(pre), inv_tau)
        f_tau = Tensor(np.full(f_phi.shape, inv_tau))
        return [f_tau] * n_steps, [f_phi] * n_steps


def gate_forward(core, u_step: Tensor, t_n: float, hidden: Tensor | None):
    """Single gate step on [u; t_n]; see RecurrentGateCore.step."""
    return core.step(u_step, t_n, hidden)


# --------------------------------------------------------------------------
# integration
# --------------------------------------------------------------------------

def euler_step(a_n: Tensor, f_tau: Tensor, f_phi: Tensor, dt: float) -> Tensor:
    """a_{n+1} = a_n + dt * (-f_tau * a_n + f_phi)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return T.add(a_n, T.scale(T.add(T.mul(T.neg(f_tau), a_n), f_phi), dt))


def clamp_dt(dt_nominal: float, f_tau_batch) -> float:
    """min(dt_nominal, 1/max f_tau): guarantees dt * f_tau <= 1 everywhere.

    The max-reduction is a plain float off the gradient tape.
    """
    if dt_nominal <= 0:
        raise ValueError("dt_nominal must be positive")
    arr = f_tau_batch.data if isinstance(f_tau_batch, Tensor) else np.asarray(f_tau_batch)
    if arr.size == 0:
        return float(dt_nominal)
    if (arr <= 0).any():
        raise ValueError("f_tau must be strictly positive")
    return float(min(dt_nominal, 1.0 / arr.max()))


def integrate_logits(f_taus: list[Tensor], f_phis: list[Tensor],
                     dt_nominal: float, clamp: bool = True,
                     a0: Tensor | None = None):
    """Run the Euler recursion from a0 (default 0) with one global dt.

    Returns (final state tensor, LogitTrajectory). Disabling the clamp is
    only meant for instability demonstrations.
    """
    if clamp:
        dt = clamp_dt(dt_nominal, np.concatenate(
            [f.data.reshape(-1) for f in f_taus]))
    else:
        dt = float(dt_nominal)
    a = a0 if a0 is not None else Tensor(np.zeros(f_taus[0].shape))
    states = [a.data.copy()]
    for f_tau, f_phi in zip(f_taus, f_phis):
        a = euler_step(a, f_tau, f_phi, dt)
        states.append(a.data.copy())
    traj = LogitTrajectory(
        a=np.stack([s[..., 0] for s in states], axis=-1),
        f_tau=np.stack([f.data[..., 0] for f in f_taus], axis=-1),
        f_phi=np.stack([f.data[..., 0] for f in f_phis], axis=-1),
        dt_effective=dt,
        dt_nominal=float(dt_nominal),
    )
    return a, traj


# --------------------------------------------------------------------------
# attention assembly
# --------------------------------------------------------------------------

def lan_head_forward(q: Tensor, k: Tensor, v: Tensor, core, cfg: LanConfig,
                     key_mask: np.ndarray | None = None):
    """One head: pair curation, gate unroll, Euler integration, softmax,
    value aggregation. q, k, v are per-head [B,T,D]; returns
    (output [B,T_q,D], weights [B,T_q,K_eff], indices, trajectory).
    """
    B, T_q, D = q.shape
    T_k = k.shape[1]
    q4 = T.reshape(q, (B, 1, T_q, D))
    k4 = T.reshape(k, (B, 1, T_k, D))
    if cfg.top_k is None:
        pb = pairs_mod.full_pairwise_concat(q4, k4, causal=cfg.causal,
                                            key_mask=key_mask)
    else:
        pb = pairs_mod.topk_concat(q4, k4, cfg.top_k, causal=cfg.causal,
                                   key_mask=key_mask)

    f_taus, f_phis = core.unroll(pb.u, cfg.euler_steps, cfg.dt_nominal)
    a_final, traj = integrate_logits(f_taus, f_phis, cfg.dt_nominal)

    K_eff = pb.k_eff
    logits = T.reshape(a_final, (B, 1, T_q, K_eff))
    alpha = T.masked_softmax(logits, pb.valid_mask, axis=-1)

    v4 = T.reshape(v, (B, 1, T_k, v.shape[-1]))
    v_sel = T.gather_keys(v4, pb.selected_indices)
    weighted = T.mul(T.reshape(alpha, (B, 1, T_q, K_eff, 1)), v_sel)
    out = T.reshape(T.tsum(weighted, axis=3), (B, T_q, v.shape[-1]))

    weights = T.reshape(alpha, (B, T_q, K_eff))
    return out, weights, pb.selected_indices[:, 0], traj


def sink_gate(x: Tensor, multihead_out: Tensor, W_g: Tensor, b_g: Tensor,
              W_s: Tensor, b_s: Tensor) -> Tensor:
    """O = sigmoid(x W_s + b_s) * (multihead_out W_g + b_g), elementwise."""
    gate = T.sigmoid(T.add(T.matmul(x, W_s), b_s))
    projected = T.add(T.matmul(multihead_out, W_g), b_g)
    return T.mul(gate, projected)


class MultiHeadLan:
    """H liquid-attention heads processed along one batched axis.

    Per-head projections are stacked into [H,1,d,D] weights; the gate
    core carries the head axis too, so the whole block runs without a
    python-level head loop. gate_mode "recurrent" is the learned GRU
    gating; "sdpa_frozen" snaps every head to the attention limit (and
    callers should pair it with euler_steps = 1).
    """

    def __init__(self, cfg: LanConfig, rng: np.random.Generator,
                 gate_mode: str = "recurrent"):
        self.cfg = cfg
        self.gate_mode = gate_mode
        d, D, H = cfg.d_model, cfg.head_dim, cfg.heads
        self.W_q = uniform_init(rng, (H, 1, d, D), d)
        self.b_q = uniform_init(rng, (H, 1, 1, D), d)
        self.W_k = uniform_init(rng, (H, 1, d, D), d)
        self.b_k = uniform_init(rng, (H, 1, 1, D), d)
        self.W_v = uniform_init(rng, (H, 1, d, D), d)
        self.b_v = uniform_init(rng, (H, 1, 1, D), d)
        if gate_mode == "recurrent":
            self.core = RecurrentGateCore(2 * D, D, cfg.epsilon, rng, heads=H)
        elif gate_mode == "sdpa_frozen":
            self.core = SdpaFrozenGates(D)
        else:
            raise ValueError(f"unknown gate_mode {gate_mode!r}")
        self.W_g = uniform_init(rng, (d, d), d)
        self.b_g = uniform_init(rng, (d,), d)
        if cfg.sink_gate_enabled:
            # zero init: the gate opens at 0.5 and is neutral at start
            self.W_s = zeros_param((d, d))
            self.b_s = zeros_param((d,))

    def parameters(self) -> dict:
        out = {"W_q": self.W_q, "b_q": self.b_q, "W_k": self.W_k,
               "b_k": self.b_k, "W_v": self.W_v, "b_v": self.b_v}
        if self.gate_mode == "recurrent":
            out.update({f"gate.{k}": v for k, v in self.core.parameters().items()})
        out["W_g"] = self.W_g
        out["b_g"] = self.b_g
        if self.cfg.sink_gate_enabled:
            out["W_s"] = self.W_s
            out["b_s"] = self.b_s
        return out

    def _project(self, x: Tensor, W: Tensor, b: Tensor) -> Tensor:
        # [B,T,d] -> [B,H,T,D]
        x4 = T.reshape(x, (1,) + x.shape)
        return T.swapaxes(T.add(T.matmul(x4, W), b), 0, 1)

    def forward(self, x_q: Tensor, x_k: Tensor, x_v: Tensor,
                key_mask: np.ndarray | None = None,
                collect: dict | None = None) -> Tensor:
        cfg = self.cfg
        B, T_q, d = x_q.shape
        q = self._project(x_q, self.W_q, self.b_q)
        k = self._project(x_k, self.W_k, self.b_k)
        v = self._project(x_v, self.W_v, self.b_v)
        if cfg.top_k is None:
            pb = pairs_mod.full_pairwise_concat(q, k, causal=cfg.causal,
                                                key_mask=key_mask)
        else:
            pb = pairs_mod.topk_concat(q, k, cfg.top_k, causal=cfg.causal,
                                       key_mask=key_mask)

        f_taus, f_phis = self.core.unroll(pb.u, cfg.euler_steps,
                                          cfg.dt_nominal)
        a_final, traj = integrate_logits(f_taus, f_phis, cfg.dt_nominal)

        H, D, K_eff = cfg.heads, cfg.head_dim, pb.k_eff
        logits = T.reshape(a_final, (B, H, T_q, K_eff))
        alpha = T.masked_softmax(logits, pb.valid_mask, axis=-1)
        v_sel = T.gather_keys(v, pb.selected_indices)
        weighted = T.mul(T.reshape(alpha, (B, H, T_q, K_eff, 1)), v_sel)
        out_heads = T.tsum(weighted, axis=3)                 # [B,H,T_q,D]
        merged = T.reshape(T.swapaxes(out_heads, 1, 2), (B, T_q, H * D))

        if collect is not None:
            collect.setdefault("weights", []).append(alpha.data.copy())
            collect.setdefault("indices", []).append(pb.selected_indices.copy())
            collect.setdefault("trajectories", []).append(traj)

        if cfg.sink_gate_enabled:
            return sink_gate(x_q, merged, self.W_g, self.b_g,
                             self.W_s, self.b_s)
        return T.add(T.matmul(merged, self.W_g), self.b_g)


def multi_head_lan(x_q: Tensor, x_k: Tensor, x_v: Tensor,
                   params: MultiHeadLan, cfg: LanConfig | None = None,
                   key_mask: np.ndarray | None = None,
                   collect: dict | None = None) -> Tensor:
    """Functional entry point over a parameter bundle."""
    if cfg is not None and cfg is not params.cfg:
        params = _with_cfg(params, cfg)
    return params.forward(x_q, x_k, x_v, key_mask=key_mask, collect=collect)


def _with_cfg(params: MultiHeadLan, cfg: LanConfig) -> MultiHeadLan:
    clone = object.__new__(MultiHeadLan)
    clone.__dict__.update(params.__dict__)
    clone.cfg = cfg
    return clone
