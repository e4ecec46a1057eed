"""Latent-conditioned autoregressive token model and its training step.

The observation model factors as prod_t p(x_t | x_<t, z): a single GRU layer
over token embeddings, with the projected latent added to the input at every
position so gradients with respect to z stay alive along the whole sequence.
A Gaussian observation variant over the latent projection output supports
continuous toy data and conjugate-posterior checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .params import ParamStore, glorot_uniform, optimizer_step
from .prior import EBMPrior, LangevinConfig, alpha_gradient, sample_posterior_chains, sample_prior
from .rng import child_seed, make_rng, seed_seq


from .autodiff import _np_sigmoid as _stable_sigmoid


class GeneratorParams:
    """Parameters of the conditional token model p(x | z).

    beta holds: token embeddings (V, e), latent projection (d -> e), one
    GRU layer of width ``hidden``, and the output projection (hidden -> V).
    ``obs_sigma2`` is the observation variance of the Gaussian variant.
    """

    def __init__(
        self,
        vocab_size: int,
        latent_dim: int,
        hidden: int = 64,
        embed: int | None = None,
        obs_sigma2: float = 1.0,
        seed: int = 0,
    ):
        if vocab_size < 2:
            raise ContractError(f"vocab_size must be >= 2, got {vocab_size}")
        if obs_sigma2 <= 0:
            raise ContractError(f"obs_sigma2 must be positive, got {obs_sigma2}")
        self.vocab_size = int(vocab_size)
        self.latent_dim = int(latent_dim)
        self.hidden = int(hidden)
        self.embed = int(embed) if embed is not None else int(hidden)
        self.obs_sigma2 = float(obs_sigma2)
        self.beta = ParamStore()
        rng = np.random.default_rng(seed_seq(seed, "generator-init"))
        e, h, v, d = self.embed, self.hidden, self.vocab_size, self.latent_dim
        self.beta.add("emb", glorot_uniform(rng, v, e))
        self.beta.add("zproj/W", glorot_uniform(rng, d, e))
        self.beta.add("zproj/b", np.zeros(e))
        self.beta.add("gru/Wx", glorot_uniform(rng, e, 3 * h, shape=(e, 3 * h)))
        self.beta.add("gru/Wh", glorot_uniform(rng, h, 3 * h, shape=(h, 3 * h)))
        self.beta.add("gru/bx", np.zeros(3 * h))
        self.beta.add("gru/bh", np.zeros(3 * h))
        self.beta.add("out/W", glorot_uniform(rng, h, v))
        self.beta.add("out/b", np.zeros(v))

    # graph GRU step: h, x are (B, hidden) / (B, embed) tensors
    def step_graph(self, h: Tensor, x: Tensor) -> Tensor:
        gx = ad.affine(x, self.beta["gru/Wx"], self.beta["gru/bx"])
        gh = ad.affine(h, self.beta["gru/Wh"], self.beta["gru/bh"])
        return ad.gru_cell(h, gx, gh)

    # numpy GRU step with identical arithmetic, for sampling paths
    def step_np(self, h: np.ndarray, x: np.ndarray) -> np.ndarray:
        hw = self.hidden
        gx = x @ self.beta["gru/Wx"].data + self.beta["gru/bx"].data
        gh = h @ self.beta["gru/Wh"].data + self.beta["gru/bh"].data
        r = _stable_sigmoid(gx[..., :hw] + gh[..., :hw])
        u = _stable_sigmoid(gx[..., hw : 2 * hw] + gh[..., hw : 2 * hw])
        c = np.tanh(gx[..., 2 * hw :] + r * gh[..., 2 * hw :])
        return u * h + (1.0 - u) * c

    def latent_input(self, z) -> Tensor:
        """Projected latent added to every input embedding: (B, d) -> (B, e)."""
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
        return ad.affine(z, self.beta["zproj/W"], self.beta["zproj/b"])

    def latent_input_np(self, z: np.ndarray) -> np.ndarray:
        return z @ self.beta["zproj/W"].data + self.beta["zproj/b"].data

    def logits_np(self, h: np.ndarray) -> np.ndarray:
        return h @ self.beta["out/W"].data + self.beta["out/b"].data


@dataclass
class SequenceSample:
    """One decoded sequence with its model log-probability and source latent."""

    tokens: list[int]
    log_prob: float
    latent: np.ndarray = field(repr=False)


def _check_ids(gen: GeneratorParams, seq: list[int]) -> None:
    if len(seq) == 0:
        raise ContractError("token sequence must be nonempty")
    for t in seq:
        if not 0 <= t < gen.vocab_size:
            raise ContractError(f"token id {t} out of vocabulary (V = {gen.vocab_size})")


def seq_log_prob_batch(gen: GeneratorParams, seqs: list[list[int]], z) -> Tensor:
    """Teacher-forced log-likelihoods for a batch: returns a (B,) tensor.

    Sequences may have different lengths; positions past each sequence's end
    are masked out of its sum. Position t is predicted from the previous
    token's embedding plus the projected latent (position 0 sees only the
    latent).
    """
    if not seqs:
        raise ContractError("batch must be nonempty")
    for s in seqs:
        _check_ids(gen, s)
    bsz = len(seqs)
    tmax = max(len(s) for s in seqs)
    targets = np.zeros((bsz, tmax), dtype=np.intp)
    mask = np.zeros((bsz, tmax))
    for i, s in enumerate(seqs):
        targets[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    zc = gen.latent_input(z)
    h = Tensor(np.zeros((bsz, gen.hidden)))
    total = Tensor(np.zeros(bsz))
    for t in range(tmax):
        if t == 0:
            x = zc
        else:
            x = ad.add(ad.embedding(gen.beta["emb"], targets[:, t - 1]), zc)
        h = gen.step_graph(h, x)
        logits = ad.affine(h, gen.beta["out/W"], gen.beta["out/b"])
        logp = ad.token_log_prob(logits, targets[:, t])
        total = ad.add(total, ad.mul(logp, Tensor(mask[:, t])))
    return total


def seq_log_prob(gen: GeneratorParams, x: list[int], z) -> Tensor:
    """log p(x | z) for one sequence, teacher-forced; scalar tensor."""
    z = np.asarray(z, dtype=np.float64) if not isinstance(z, Tensor) else z
    zrow = ad.reshape(z, (1, gen.latent_dim)) if isinstance(z, Tensor) else z.reshape(1, -1)
    return ad.reshape(seq_log_prob_batch(gen, [list(x)], zrow), ())


def gauss_log_prob(gen: GeneratorParams, x, z) -> Tensor:
    """Gaussian observation variant: x ~ N(g(z), obs_sigma2 I).

    g(z) is the latent projection output, so D equals the embed width.
    """
    xv = np.asarray(x, dtype=np.float64)
    if xv.shape != (gen.embed,):
        raise ContractError(f"observation has shape {xv.shape}, expected ({gen.embed},)")
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    mean = ad.add(ad.matmul(ad.reshape(z, (1, gen.latent_dim)), gen.beta["zproj/W"]), gen.beta["zproj/b"])
    resid = ad.sub(Tensor(xv.reshape(1, -1)), mean)
    quad = ad.mul(ad.sumsq(resid), -1.0 / (2.0 * gen.obs_sigma2))
    const = -0.5 * gen.embed * np.log(2.0 * np.pi * gen.obs_sigma2)
    return ad.reshape(ad.add(quad, const), ())


def generate(
    gen: GeneratorParams,
    z,
    max_len: int,
    k: int = 1,
    seed: int = 0,
    prefix: list[int] | None = None,
    eos_id: int = 1,
) -> SequenceSample:
    """Decode up to max_len tokens with top-k sampling (k = 1 is greedy).

    At each step the k most probable tokens (ties to the lowest id) are
    renormalized and sampled. The forced prefix is not part of the returned
    tokens; log_prob is the full-softmax log-probability of the emitted
    tokens. Stops after emitting eos_id.
    """
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    zv = np.asarray(z, dtype=np.float64).reshape(-1)
    if zv.shape != (gen.latent_dim,):
        raise ContractError(f"latent has shape {zv.shape}, expected ({gen.latent_dim},)")
    if prefix:
        _check_ids(gen, prefix)
    zc = gen.latent_input_np(zv[None, :])[0]
    h = np.zeros(gen.hidden)
    h = gen.step_np(h, zc)
    for tok in prefix or ():
        h = gen.step_np(h, gen.beta["emb"].data[tok] + zc)
    rng = make_rng(seed, "generate") if k > 1 else None
    tokens: list[int] = []
    log_prob = 0.0
    for _ in range(max_len):
        logits = gen.logits_np(h)
        shifted = logits - logits.max()
        logp = shifted - np.log(np.exp(shifted).sum())
        if k == 1:
            tok = int(np.argmax(logp))
        else:
            kk = min(k, gen.vocab_size)
            cand = np.lexsort((np.arange(gen.vocab_size), -logp))[:kk]
            probs = np.exp(logp[cand])
            probs /= probs.sum()
            tok = int(rng.choice(cand, p=probs))
        tokens.append(tok)
        log_prob += float(logp[tok])
        if tok == eos_id:
            break
        h = gen.step_np(h, gen.beta["emb"].data[tok] + zc)
    return SequenceSample(tokens=tokens, log_prob=log_prob, latent=zv)


def posterior_latents(
    gen: GeneratorParams,
    prior: EBMPrior,
    seqs: list[list[int]],
    cfg: LangevinConfig,
) -> np.ndarray:
    """Posterior latents for a batch, one short-run chain per sequence.

    Chain i uses stream (cfg.seed, i); generator parameters are left
    untouched (frozen during the chain gradients).
    """

    def llg(zb: np.ndarray, first: int) -> tuple[np.ndarray, np.ndarray]:
        zt = Tensor(zb, requires_grad=True)
        lp = seq_log_prob_batch(gen, seqs[first : first + zb.shape[0]], zt)
        ad.backward(ad.sum_all(lp))
        return lp.data.copy(), zt.grad

    gen.beta.freeze()
    try:
        return sample_posterior_chains(prior, llg, len(seqs), cfg)
    finally:
        gen.beta.unfreeze()


def train_step(
    gen: GeneratorParams,
    prior: EBMPrior,
    batch: list[list[int]],
    cfg: LangevinConfig,
    lr: float,
    lr_ebm: float | None = None,
    update_ebm: bool = True,
    method: str = "adam",
) -> float:
    """One maximum-likelihood update of the generator (and optionally the prior).

    Per sequence: draw a posterior latent by short-run Langevin, then descend
    the mean negative log-likelihood at those latents. When update_ebm is
    set, the prior's correction net takes a contrastive step using the
    posterior latents against fresh prior samples. Returns the pre-step mean
    NLL.
    """
    if not batch:
        raise ContractError("batch must be nonempty")
    zs = posterior_latents(gen, prior, batch, cfg)
    gen.beta.zero_grads()
    lp = seq_log_prob_batch(gen, batch, Tensor(zs))
    nll = ad.mul(ad.sum_all(lp), -1.0 / len(batch))
    ad.backward(nll)
    nll_value = nll.item()
    if update_ebm:
        neg_cfg = LangevinConfig(cfg.steps, cfg.step_size, child_seed(cfg.seed, "ebm-neg"))
        neg = sample_prior(prior, len(batch), neg_cfg)
        ascent = alpha_gradient(prior, zs, neg)
        for name, t in prior.alpha.items():
            t.grad = -ascent[name]
        optimizer_step(prior.alpha, lr if lr_ebm is None else lr_ebm, method=method)
    optimizer_step(gen.beta, lr, method=method)
    return nll_value
