"""Energy-corrected Gaussian prior over latents and short-run Langevin samplers.

The prior density is proportional to exp(E(z)) with

    E(z) = F(z) - ||z||^2 / (2 sigma2)

where F is a small tanh MLP (the learned correction) and the quadratic term
comes from the isotropic Gaussian reference. The normalizing constant is
never represented or computed; samplers and gradients use unnormalized
energies only.

Chains ascend the log density: z <- z + s * grad E(z) + sqrt(2 s) * noise,
run for a fixed number of steps from z0 ~ N(0, sigma2 I). Each chain owns
the random stream (seed, chain_index), so results do not depend on chunking
or execution order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError
from .params import ParamStore, glorot_uniform
from .rng import seed_seq

# cap on pre-generated noise buffer elements per chain block
_NOISE_BUDGET = 4_194_304


@dataclass
class LangevinConfig:
    """Fixed-length chain settings: steps K, step size s, stream seed."""

    steps: int
    step_size: float
    seed: int

    def __post_init__(self):
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 0:
            raise ContractError(f"steps must be a non-negative integer, got {self.steps!r}")
        if not np.isfinite(self.step_size) or self.step_size < 0:
            raise ContractError(f"step_size must be finite and >= 0, got {self.step_size!r}")


class EBMPrior:
    """Latent prior p(z) ∝ exp(F(z)) N(z; 0, sigma2 I).

    The correction MLP's output layer starts at zero, so a freshly built
    prior is exactly the Gaussian reference (F ≡ 0 and grad F ≡ 0) until
    trained.
    """

    def __init__(
        self,
        latent_dim: int,
        sigma2: float = 1.0,
        hidden: int = 64,
        n_hidden: int = 2,
        seed: int = 0,
    ):
        if latent_dim < 1:
            raise ContractError(f"latent_dim must be >= 1, got {latent_dim}")
        if sigma2 <= 0:
            raise ContractError(f"sigma2 must be positive, got {sigma2}")
        self.latent_dim = int(latent_dim)
        self.sigma2 = float(sigma2)
        self.hidden = int(hidden)
        self.n_hidden = int(n_hidden)
        self.alpha = ParamStore()
        rng = np.random.default_rng(seed_seq(seed, "prior-init"))
        fan_in = self.latent_dim
        for i in range(n_hidden):
            self.alpha.add(f"mlp{i}/W", glorot_uniform(rng, fan_in, hidden))
            self.alpha.add(f"mlp{i}/b", np.zeros(hidden))
            fan_in = hidden
        self.alpha.add("out/W", np.zeros((fan_in, 1)))
        self.alpha.add("out/b", np.zeros(1))

    # -- fast numpy paths (no graph), used by the samplers --------------------

    def correction_values(self, zb: np.ndarray) -> np.ndarray:
        """F(z) for a batch: (n, d) -> (n,)."""
        h = zb
        for i in range(self.n_hidden):
            h = np.tanh(h @ self.alpha[f"mlp{i}/W"].data + self.alpha[f"mlp{i}/b"].data)
        return (h @ self.alpha["out/W"].data + self.alpha["out/b"].data)[:, 0]

    def correction_grad_z(self, zb: np.ndarray) -> np.ndarray:
        """grad_z F(z) for a batch: (n, d) -> (n, d)."""
        hs = [zb]
        h = zb
        for i in range(self.n_hidden):
            h = np.tanh(h @ self.alpha[f"mlp{i}/W"].data + self.alpha[f"mlp{i}/b"].data)
            hs.append(h)
        g = np.broadcast_to(self.alpha["out/W"].data[:, 0], hs[-1].shape).copy()
        for i in range(self.n_hidden - 1, -1, -1):
            g = (g * (1.0 - hs[i + 1] ** 2)) @ self.alpha[f"mlp{i}/W"].data.T
        return g

    def energy_values(self, zb: np.ndarray) -> np.ndarray:
        return self.correction_values(zb) - (zb * zb).sum(axis=1) / (2.0 * self.sigma2)

    def energy_grad(self, zb: np.ndarray) -> np.ndarray:
        return self.correction_grad_z(zb) - zb / self.sigma2

    # -- graph path, used for training alpha and for cross-checks -------------

    def correction_graph(self, z: Tensor) -> Tensor:
        """F(z) through the autodiff graph: (n, d) Tensor -> (n,) Tensor."""
        h = z
        for i in range(self.n_hidden):
            h = ad.tanh(ad.add(ad.matmul(h, self.alpha[f"mlp{i}/W"]), self.alpha[f"mlp{i}/b"]))
        out = ad.add(ad.matmul(h, self.alpha["out/W"]), self.alpha["out/b"])
        return ad.reshape(out, (z.shape[0],))

    def energy_graph(self, z: Tensor) -> Tensor:
        quad = ad.mul(ad.sumsq(z, axis=1), 1.0 / (2.0 * self.sigma2))
        return ad.sub(self.correction_graph(z), quad)


def energy(prior: EBMPrior, z) -> float:
    """E(z) = F(z) - ||z||^2 / (2 sigma2) for a single latent."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (prior.latent_dim,):
        raise ContractError(f"latent has shape {z.shape}, expected ({prior.latent_dim},)")
    if not np.isfinite(z).all():
        raise ContractError("latent contains non-finite entries")
    return float(prior.energy_values(z[None, :])[0])


def _run_chains(
    prior: EBMPrior,
    chain_seeds: list[np.random.SeedSequence],
    steps: int,
    step_size: float,
    extra_grad: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None,
    chain_offset: int = 0,
) -> np.ndarray:
    """Run one block of chains in lockstep; returns final states (n, d)."""
    d = prior.latent_dim
    scale = np.sqrt(prior.sigma2)
    rngs = [np.random.default_rng(ss) for ss in chain_seeds]
    z = np.stack([rng.normal(0.0, scale, size=d) for rng in rngs])
    if steps == 0:
        return z
    noise = np.stack([rng.standard_normal((steps, d)) for rng in rngs], axis=1)
    coef = np.sqrt(2.0 * step_size)
    guard = 1e3 * np.sqrt(d * prior.sigma2)
    for k in range(steps):
        grad = prior.energy_grad(z)
        if extra_grad is not None:
            vals, extra = extra_grad(z)
            if not (np.isfinite(vals).all() and np.isfinite(extra).all()):
                bad = int(np.argwhere(~(np.isfinite(extra).all(axis=1) & np.isfinite(vals)))[0, 0])
                raise NumericError(
                    f"non-finite log-likelihood gradient at chain {chain_offset + bad}, step {k}"
                )
            grad = grad + extra
        if not np.isfinite(grad).all():
            bad = int(np.argwhere(~np.isfinite(grad).all(axis=1))[0, 0])
            raise NumericError(f"non-finite energy gradient at chain {chain_offset + bad}, step {k}")
        z = z + step_size * grad + coef * noise[k]
        norms = np.sqrt((z * z).sum(axis=1))
        if np.any(norms > guard):
            bad = int(np.argmax(norms > guard))
            raise NumericError(
                f"chain {chain_offset + bad} diverged at step {k}: |z| = {norms[bad]:.3g} > {guard:.3g}"
            )
    return z


def sample_prior(prior: EBMPrior, n: int, cfg: LangevinConfig) -> np.ndarray:
    """Draw n latents by short-run Langevin ascent of the prior energy.

    Chain i starts at z0 ~ N(0, sigma2 I) drawn from stream (cfg.seed, i)
    and runs exactly cfg.steps updates. Returns an (n, d) array.
    """
    if n < 1:
        raise ContractError(f"sample count must be >= 1, got {n}")
    block = max(1, min(n, _NOISE_BUDGET // max(1, cfg.steps * prior.latent_dim)))
    out = np.empty((n, prior.latent_dim))
    for start in range(0, n, block):
        stop = min(n, start + block)
        seeds = [seed_seq(cfg.seed, i) for i in range(start, stop)]
        out[start:stop] = _run_chains(prior, seeds, cfg.steps, cfg.step_size, chain_offset=start)
    return out


def sample_posterior(
    prior: EBMPrior,
    loglik_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    cfg: LangevinConfig,
    chain_index: int = 0,
) -> np.ndarray:
    """Draw one posterior latent: ascend E(z) + log p(x | z) for cfg.steps.

    ``loglik_grad`` maps a latent (d,) to (log p(x | z), grad wrt z). The
    chain uses stream (cfg.seed, chain_index); with a zero log-likelihood it
    reproduces the matching prior chain exactly.
    """

    def batched(zb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        val, grad = loglik_grad(zb[0])
        return np.asarray([val], dtype=np.float64), np.asarray(grad, dtype=np.float64)[None, :]

    seeds = [seed_seq(cfg.seed, chain_index)]
    return _run_chains(
        prior, seeds, cfg.steps, cfg.step_size, extra_grad=batched, chain_offset=chain_index
    )[0]


def sample_posterior_chains(
    prior: EBMPrior,
    loglik_grad_batch: Callable[[np.ndarray, int], tuple[np.ndarray, np.ndarray]],
    n: int,
    cfg: LangevinConfig,
) -> np.ndarray:
    """Vectorized posterior chains; chain i uses stream (cfg.seed, i).

    ``loglik_grad_batch(z_block, first_chain)`` maps a (m, d) block of
    latents for chains [first_chain, first_chain + m) to ((m,) log-
    likelihoods, (m, d) gradients). Equivalent to n ``sample_posterior``
    calls with chain_index = i, batched for speed.
    """
    if n < 1:
        raise ContractError(f"sample count must be >= 1, got {n}")
    block = max(1, min(n, _NOISE_BUDGET // max(1, cfg.steps * prior.latent_dim)))
    out = np.empty((n, prior.latent_dim))
    for start in range(0, n, block):
        stop = min(n, start + block)
        seeds = [seed_seq(cfg.seed, i) for i in range(start, stop)]

        def block_grad(zb: np.ndarray, first: int = start) -> tuple[np.ndarray, np.ndarray]:
            return loglik_grad_batch(zb, first)

        out[start:stop] = _run_chains(
            prior, seeds, cfg.steps, cfg.step_size, extra_grad=block_grad, chain_offset=start
        )
    return out


def alpha_gradient(
    prior: EBMPrior,
    posterior_samples: np.ndarray,
    prior_samples: np.ndarray,
) -> dict[str, np.ndarray]:
    """Ascent direction on the correction parameters.

    mean over posterior samples of grad F minus the same mean over prior
    samples; stepping parameters along it raises the data likelihood.
    """
    post = np.asarray(posterior_samples, dtype=np.float64)
    neg = np.asarray(prior_samples, dtype=np.float64)
    if post.ndim != 2 or post.shape[0] == 0:
        raise ContractError("posterior sample set must be a nonempty (n, d) array")
    if neg.ndim != 2 or neg.shape[0] == 0:
        raise ContractError("prior sample set must be a nonempty (n, d) array")
    if post.shape[1] != prior.latent_dim or neg.shape[1] != prior.latent_dim:
        raise ContractError(
            f"sample dimension mismatch: {post.shape[1]}/{neg.shape[1]} vs latent_dim {prior.latent_dim}"
        )
    prior.alpha.zero_grads()
    objective = ad.sub(
        ad.mean_all(prior.correction_graph(Tensor(post))),
        ad.mean_all(prior.correction_graph(Tensor(neg))),
    )
    ad.backward(objective)
    grads = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in prior.alpha.items()
    }
    prior.alpha.zero_grads()
    return grads
