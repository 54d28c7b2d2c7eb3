"""Diagonal-Gaussian MLP policy with exact gradient machinery.

One shared parameter vector drives every agent: a small ReLU network maps
the observation to the action mean, and a state-independent log-std
parameter sets exploration noise. Everything the trust-region optimizer
needs is implemented directly on flat parameter vectors: log-density
gradients (reverse mode), Jacobian-vector products (forward mode), and
the Gauss-Newton KL curvature assembled from the two.

All math is plain NumPy float64; no autodiff framework is involved, so
gradients are validated against finite differences in the test suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = "ringflow-policy v1"


class MLP:
    """Fully connected ReLU network on flat parameter vectors.

    Layer l computes a_{l+1} = relu(a_l W_l^T + b_l), with no activation
    after the final layer. Parameters live in one float64 vector in the
    order W_0, b_0, W_1, b_1, ..., W_last, b_last.
    """

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.out_dim = out_dim
        dims = [in_dim, *hidden, out_dim]
        self.shapes: list[tuple[int, int]] = [
            (dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
        self.n_layers = len(self.shapes)
        self.n_params = sum(o * i + o for o, i in self.shapes)
        self._offsets = []
        off = 0
        for o, i in self.shapes:
            self._offsets.append((off, off + o * i, off + o * i + o))
            off += o * i + o

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Weight/bias views into the flat vector (no copies)."""
        layers = []
        for (o, i), (w0, b0, end) in zip(self.shapes, self._offsets):
            layers.append((params[w0:b0].reshape(o, i), params[b0:end]))
        return layers

    def init_params(self, rng: np.random.Generator,
                    final_scale: float = 1.0) -> np.ndarray:
        """Uniform fan-in init, biases zero, last layer scaled down."""
        params = np.zeros(self.n_params)
        layers = self.unpack(params)
        for li, (w, _) in enumerate(layers):
            bound = 1.0 / math.sqrt(w.shape[1])
            w[:] = rng.uniform(-bound, bound, w.shape)
            if li == self.n_layers - 1:
                w *= final_scale
        return params

    def forward(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        a = x
        for li, (w, b) in enumerate(self.unpack(params)):
            a = a @ w.T + b
            if li < self.n_layers - 1:
                a = np.maximum(a, 0.0)
        return a

    def forward_cached(self, params: np.ndarray, x: np.ndarray
                       ) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns (output, cache); cache holds each layer's input
        activation, which is all backward/forward passes need (the ReLU
        mask is activation > 0)."""
        cache = []
        a = x
        for li, (w, b) in enumerate(self.unpack(params)):
            cache.append(a)
            a = a @ w.T + b
            if li < self.n_layers - 1:
                a = np.maximum(a, 0.0)
        return a, cache

    def vjp(self, params: np.ndarray, cache: list[np.ndarray],
            dout: np.ndarray) -> np.ndarray:
        """Parameter gradient of sum(dout * output): reverse mode."""
        grad = np.zeros(self.n_params)
        layers = self.unpack(params)
        glayers = MLP.unpack(self, grad)
        g = dout
        for li in range(self.n_layers - 1, -1, -1):
            a = cache[li]
            gw, gb = glayers[li]
            gw += g.T @ a
            gb += g.sum(axis=0)
            if li > 0:
                g = (g @ layers[li][0]) * (a > 0.0)
        return grad

    def jvp(self, params: np.ndarray, cache: list[np.ndarray],
            v: np.ndarray) -> np.ndarray:
        """Directional derivative of the output along parameter direction
        v (forward mode), at the point the cache was built from."""
        layers = self.unpack(params)
        vlayers = MLP.unpack(self, v)
        da = None
        for li in range(self.n_layers):
            a = cache[li]
            w, _ = layers[li]
            dw, db = vlayers[li]
            dz = a @ dw.T + db
            if da is not None:
                dz = dz + da @ w.T
            if li < self.n_layers - 1:
                # cache[li + 1] is the post-ReLU activation of this layer
                da = dz * (cache[li + 1] > 0.0)
            else:
                da = dz
        return da


@dataclass(frozen=True)
class ActionSample:
    action: np.ndarray
    log_prob: float


class GaussianPolicy:
    """Diagonal Gaussian over accelerations, mean from an MLP.

    The flat parameter vector is the MLP's parameters followed by
    act_dim log-std entries. Defaults give the 15 -> 64,64,64 -> 1
    architecture (9410 parameters).
    """

    def __init__(self, obs_dim: int = 15, hidden: tuple[int, ...] = (64, 64, 64),
                 act_dim: int = 1):
        self.obs_dim = obs_dim
        self.hidden = tuple(hidden)
        self.act_dim = act_dim
        self.net = MLP(obs_dim, hidden, act_dim)
        self.n_params = self.net.n_params + act_dim

    # -- parameter plumbing ----------------------------------------------

    def split(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return params[:self.net.n_params], params[self.net.n_params:]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Fan-in init with the mean head scaled by 0.01 (near-zero
        initial actions) and log_std = 0 (unit exploration noise)."""
        net = self.net.init_params(rng, final_scale=0.01)
        return np.concatenate([net, np.zeros(self.act_dim)])

    # -- distribution ------------------------------------------------------

    def forward(self, params: np.ndarray, obs: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray]:
        net, log_std = self.split(params)
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 1
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(
                f"expected obs dim {self.obs_dim}, got {obs.shape[-1]}")
        mean = self.net.forward(net, obs[None, :] if single else obs)
        return (mean[0] if single else mean), log_std

    def sample(self, params: np.ndarray, obs: np.ndarray,
               rng: np.random.Generator) -> ActionSample:
        mean, log_std = self.forward(params, obs)
        std = np.exp(log_std)
        action = mean + std * rng.standard_normal(self.act_dim)
        return ActionSample(action=action,
                            log_prob=float(self.log_prob(params, obs, action)))

    def sample_batch(self, params: np.ndarray, obs: np.ndarray,
                     rng: np.random.Generator
                     ) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized sampling for B agents: (B, act), (B,)."""
        mean, log_std = self.forward(params, obs)
        std = np.exp(log_std)
        noise = rng.standard_normal(mean.shape)
        actions = mean + std * noise
        logps = self._log_prob_given_mean(mean, log_std, actions)
        return actions, logps

    def _log_prob_given_mean(self, mean, log_std, actions) -> np.ndarray:
        z = (actions - mean) / np.exp(log_std)
        return (-0.5 * np.sum(z * z, axis=-1)
                - np.sum(log_std)
                - 0.5 * self.act_dim * LOG_2PI)

    def log_prob(self, params: np.ndarray, obs: np.ndarray,
                 actions: np.ndarray) -> np.ndarray | float:
        mean, log_std = self.forward(params, obs)
        lp = self._log_prob_given_mean(
            mean, log_std, np.asarray(actions, dtype=np.float64))
        return float(lp) if np.ndim(lp) == 0 else lp

    def entropy(self, params: np.ndarray) -> float:
        _, log_std = self.split(params)
        return float(np.sum(log_std) + 0.5 * self.act_dim * (1.0 + LOG_2PI))

    def kl(self, params_old: np.ndarray, params_new: np.ndarray,
           obs: np.ndarray) -> float:
        """Mean closed-form KL(old || new) over an observation batch."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        mean_o, ls_o = self.forward(params_old, obs)
        mean_n, ls_n = self.forward(params_new, obs)
        var_o, var_n = np.exp(2.0 * ls_o), np.exp(2.0 * ls_n)
        per_dim = (ls_n - ls_o
                   + (var_o + (mean_o - mean_n) ** 2) / (2.0 * var_n)
                   - 0.5)
        return float(np.mean(np.sum(per_dim, axis=-1)))

    # -- gradients ---------------------------------------------------------

    def grad_log_prob(self, params: np.ndarray, obs: np.ndarray,
                      action: np.ndarray) -> np.ndarray:
        """Exact gradient of log pi(action|obs) w.r.t. every parameter."""
        net, log_std = self.split(params)
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 1
        x = obs[None, :] if single else obs
        act = np.atleast_2d(np.asarray(action, dtype=np.float64))
        mean, cache = self.net.forward_cached(net, x)
        var = np.exp(2.0 * log_std)
        dmean = (act - mean) / var
        grad_net = self.net.vjp(net, cache, dmean)
        grad_ls = np.sum((act - mean) ** 2 / var - 1.0, axis=0)
        return np.concatenate([grad_net, grad_ls])

    def surrogate_grad(self, params: np.ndarray, obs: np.ndarray,
                       actions: np.ndarray, weights: np.ndarray
                       ) -> np.ndarray:
        """Gradient at theta_old of mean_b[ratio_b * weights_b]; the
        importance ratio is 1 there, so this is mean(w * grad log pi)."""
        net, log_std = self.split(params)
        obs = np.asarray(obs, dtype=np.float64)
        B = obs.shape[0]
        mean, cache = self.net.forward_cached(net, obs)
        var = np.exp(2.0 * log_std)
        w = np.asarray(weights, dtype=np.float64)[:, None]
        dmean = w * (actions - mean) / var / B
        grad_net = self.net.vjp(net, cache, dmean)
        grad_ls = np.sum(
            w * ((actions - mean) ** 2 / var - 1.0), axis=0) / B
        return np.concatenate([grad_net, grad_ls])

    def make_fvp(self, params: np.ndarray, obs: np.ndarray,
                 damping: float = 0.0):
        """Fisher(-KL Hessian) vector product closure at theta_old.

        Gauss-Newton form: the KL Hessian in output space is diag(1/var)
        for the mean and 2 per log-std dimension (exact at theta_old,
        where dKL/d(output) = 0), pulled back through the network Jacobian
        with one jvp and one vjp. Averaged over the batch; damping adds
        a multiple of the identity.
        """
        net, log_std = self.split(params)
        obs = np.asarray(obs, dtype=np.float64)
        B = obs.shape[0]
        _, cache = self.net.forward_cached(net, obs)
        inv_var = np.exp(-2.0 * log_std)

        def fvp(v: np.ndarray) -> np.ndarray:
            v_net, v_ls = self.split(v)
            dmean = self.net.jvp(net, cache, v_net)
            out_net = self.net.vjp(net, cache, dmean * inv_var / B)
            out_ls = 2.0 * v_ls
            return np.concatenate([out_net, out_ls]) + damping * v

        return fvp


# -- checkpoint io -----------------------------------------------------------


def save_checkpoint(path, policy: GaussianPolicy, params: np.ndarray) -> None:
    """Plain-text checkpoint: magic line, architecture line, one float
    per line in canonical flattening order (repr: exact round-trip)."""
    if params.shape != (policy.n_params,):
        raise ValueError("parameter vector does not match architecture")
    hidden = ",".join(str(h) for h in policy.hidden)
    with open(path, "w", newline="") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        fh.write(f"obs={policy.obs_dim} hidden={hidden} act={policy.act_dim}\n")
        for x in params:
            fh.write(repr(float(x)) + "\n")


def load_checkpoint(path) -> tuple[GaussianPolicy, np.ndarray]:
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a policy checkpoint (header {magic!r})")
        arch = dict(kv.split("=") for kv in fh.readline().split())
        try:
            obs_dim = int(arch["obs"])
            hidden = tuple(int(h) for h in arch["hidden"].split(","))
            act_dim = int(arch["act"])
        except (KeyError, ValueError) as exc:
            raise ValueError(f"bad architecture line: {arch}") from exc
        values = [float(line) for line in fh if line.strip()]
    policy = GaussianPolicy(obs_dim, hidden, act_dim)
    if len(values) != policy.n_params:
        raise ValueError(
            f"checkpoint holds {len(values)} parameters, architecture "
            f"needs {policy.n_params}")
    return policy, np.array(values, dtype=np.float64)
