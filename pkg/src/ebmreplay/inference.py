"""Slot-energy inference network: encode a question, emit per-slot answer logits.

The network approximates the answer that minimizes the generator-side energy
of a question/answer pair. Each answer slot m carries logits z_m over the
vocabulary; the softmax of z_m is used twice: as the expected-embedding soft
input to the generator's next decoder slot, and as the weighting of that
slot's conditional log-probabilities in the energy. Training descends the
summed slot energies with the generator frozen, so gradients reach the slot
logits through both uses.

Answer slots range over the feasible answer alphabet: control tokens that
can never appear in an answer (PAD, SEP, GEN) are suppressed in the slot
head by a large negative additive mask, leaving EOS available to terminate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .generator import GeneratorParams, posterior_latents
from .params import ParamStore, glorot_uniform, optimizer_step
from .prior import EBMPrior, LangevinConfig
from .rng import make_rng, seed_seq
from .tasks import EOS_ID, GEN_ID, PAD_ID, SEP_ID, question_prefix, serialize_example

_MASK_VALUE = -1e9


class InferenceParams:
    """Question encoder plus recurrent slot head producing max_slots logit rows."""

    def __init__(
        self,
        vocab_size: int,
        max_slots: int,
        hidden: int = 64,
        embed: int | None = None,
        seed: int = 0,
        masked_ids: tuple[int, ...] = (PAD_ID, SEP_ID, GEN_ID),
        logit_scale: float = 5.0,
    ):
        if vocab_size < 2:
            raise ContractError(f"vocab_size must be >= 2, got {vocab_size}")
        if max_slots < 1:
            raise ContractError(f"max_slots must be >= 1, got {max_slots}")
        self.vocab_size = int(vocab_size)
        self.max_slots = int(max_slots)
        self.hidden = int(hidden)
        self.embed = int(embed) if embed is not None else int(hidden)
        # slot logits are squashed into [-logit_scale, logit_scale]: the
        # energy is linear in softmax(z_m), so unbounded logits would let a
        # wrongly committed slot saturate and stop receiving gradient
        self.logit_scale = float(logit_scale)
        mask = np.zeros(vocab_size)
        for tid in masked_ids:
            if 0 <= tid < vocab_size:
                mask[tid] = _MASK_VALUE
        self.slot_mask = mask
        self.psi = ParamStore()
        rng = np.random.default_rng(seed_seq(seed, "inference-init"))
        e, h, v = self.embed, self.hidden, self.vocab_size
        self.psi.add("emb", glorot_uniform(rng, v, e))
        for part in ("enc", "dec"):
            self.psi.add(f"{part}/Wx", glorot_uniform(rng, e, 3 * h, shape=(e, 3 * h)))
            self.psi.add(f"{part}/Wh", glorot_uniform(rng, h, 3 * h, shape=(h, 3 * h)))
            self.psi.add(f"{part}/bx", np.zeros(3 * h))
            self.psi.add(f"{part}/bh", np.zeros(3 * h))
        self.psi.add("dec/q", glorot_uniform(rng, 1, e, shape=(1, e)))
        self.psi.add("out/W", glorot_uniform(rng, h, v))
        self.psi.add("out/b", np.zeros(v))

    def _gru(self, part: str, h: Tensor, gx: Tensor) -> Tensor:
        gh = ad.affine(h, self.psi[f"{part}/Wh"], self.psi[f"{part}/bh"])
        return ad.gru_cell(h, gx, gh)

    def encode_batch(self, questions: list[list[int]]) -> Tensor:
        """Encoder summary for a batch of questions: (B, hidden).

        Masked mean of the recurrent states over each question's length, so
        early context tokens keep their weight even when every question ends
        with the same prompt suffix.
        """
        if not questions:
            raise ContractError("batch must be nonempty")
        for q in questions:
            if len(q) == 0:
                raise ContractError("question must be nonempty")
            for t in q:
                if not 0 <= t < self.vocab_size:
                    raise ContractError(f"token id {t} out of vocabulary (V = {self.vocab_size})")
        bsz = len(questions)
        tmax = max(len(q) for q in questions)
        ids = np.zeros((bsz, tmax), dtype=np.intp)
        alive = np.zeros((bsz, tmax))
        for i, q in enumerate(questions):
            ids[i, : len(q)] = q
            alive[i, : len(q)] = 1.0
        inv_len = 1.0 / alive.sum(axis=1, keepdims=True)
        h = Tensor(np.zeros((bsz, self.hidden)))
        pooled = Tensor(np.zeros((bsz, self.hidden)))
        for t in range(tmax):
            x = ad.embedding(self.psi["emb"], ids[:, t])
            gx = ad.affine(x, self.psi["enc/Wx"], self.psi["enc/bx"])
            h_new = self._gru("enc", h, gx)
            m = Tensor(alive[:, t : t + 1])
            h = ad.add(ad.mul(h_new, m), ad.mul(h, ad.sub(1.0, m)))
            pooled = ad.add(pooled, ad.mul(h_new, Tensor(alive[:, t : t + 1] * inv_len)))
        return pooled

    def slot_logits_batch(self, h_enc: Tensor, n_slots: int | None = None) -> list[Tensor]:
        """Unroll the slot head: list of n_slots (B, V) logit tensors."""
        n_slots = self.max_slots if n_slots is None else n_slots
        gx = ad.affine(self.psi["dec/q"], self.psi["dec/Wx"], self.psi["dec/bx"])
        mask = Tensor(self.slot_mask)
        scale = self.logit_scale
        h = h_enc
        out = []
        for _ in range(n_slots):
            h = self._gru("dec", h, gx)
            raw = ad.affine(h, self.psi["out/W"], self.psi["out/b"])
            squashed = ad.mul(ad.tanh(ad.mul(raw, 1.0 / scale)), scale)
            out.append(ad.add(squashed, mask))
        return out


def infer(net: InferenceParams, x: list[int]) -> Tensor:
    """Per-slot answer logits for one question: (max_slots, V) tensor."""
    h = net.encode_batch([list(x)])
    return ad.concat(net.slot_logits_batch(h), axis=0)


@dataclass
class SlotEnergy:
    """Per-slot energies and their exact sum."""

    per_slot: list[float]
    total: float


def local_energy(z_m, cond_log_probs) -> Tensor:
    """Expected negative log-likelihood of slot m under its logit distribution.

    Both operators are softmax: the slot distribution softmax(z_m) weights
    the generator's conditional log-probabilities for the slot. cond_log_probs
    must be a normalized log-distribution (logsumexp 0 within 1e-9).
    """
    zt = z_m if isinstance(z_m, Tensor) else Tensor(np.asarray(z_m, dtype=np.float64))
    ct = (
        cond_log_probs
        if isinstance(cond_log_probs, Tensor)
        else Tensor(np.asarray(cond_log_probs, dtype=np.float64))
    )
    if zt.data.ndim != 1 or ct.data.ndim != 1 or zt.data.shape != ct.data.shape:
        raise ContractError(
            f"slot logits {zt.data.shape} and conditional log-probs {ct.data.shape} must be equal-length vectors"
        )
    peak = ct.data.max()
    lse = peak + np.log(np.exp(ct.data - peak).sum())
    if abs(lse) > 1e-9:
        raise ContractError(f"cond_log_probs not normalized: logsumexp = {lse:.3e}")
    return ad.mul(ad.sum_all(ad.mul(ad.softmax(zt), ct)), -1.0)


def total_energy(slots) -> SlotEnergy:
    """Sum local energies (floats or scalar tensors) over the answer slots."""
    values = [s.item() if isinstance(s, Tensor) else float(s) for s in slots]
    if not values:
        raise ContractError("at least one slot energy required")
    return SlotEnergy(per_slot=values, total=sum(values))


def generator_prefix_states(
    gen: GeneratorParams,
    prefixes: list[list[int]],
    latents: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-force each prefix through the generator.

    Returns (states, latent_inputs): hidden states (B, hidden) ready to
    produce the first answer slot, and the projected latents (B, embed)
    added to every subsequent soft input. ``latents`` defaults to zeros.
    """
    if latents is None:
        latents = np.zeros((len(prefixes), gen.latent_dim))
    zcs = gen.latent_input_np(np.asarray(latents, dtype=np.float64))
    states = np.zeros((len(prefixes), gen.hidden))
    for i, prefix in enumerate(prefixes):
        h = np.zeros(gen.hidden)
        h = gen.step_np(h, zcs[i])
        for tok in prefix:
            h = gen.step_np(h, gen.beta["emb"].data[tok] + zcs[i])
        states[i] = h
    return states, zcs


def slot_conditionals(
    gen: GeneratorParams,
    prefix_states: np.ndarray,
    latent_inputs: np.ndarray,
    slot_probs: list[Tensor],
    n_slots: int,
) -> list[Tensor]:
    """Generator log-conditionals for each answer slot, soft-fed.

    Slot 1's conditional comes straight from the prefix state; slot m > 1
    consumes the expected embedding of slot m-1's distribution plus the
    example's projected latent. Returns n_slots (B, V) log-prob tensors.
    """
    h = Tensor(prefix_states)
    out = [ad.log_softmax(ad.affine(h, gen.beta["out/W"], gen.beta["out/b"]))]
    for m in range(1, n_slots):
        soft = ad.add(ad.matmul(slot_probs[m - 1], gen.beta["emb"]), Tensor(latent_inputs))
        h = gen.step_graph(h, soft)
        out.append(ad.log_softmax(ad.affine(h, gen.beta["out/W"], gen.beta["out/b"])))
    return out


def _batch_energy(
    net: InferenceParams,
    gen: GeneratorParams,
    questions: list[list[int]],
    slot_counts: list[int],
    prefix_states: np.ndarray,
    latent_inputs: np.ndarray,
) -> tuple[Tensor, int]:
    """Graph of summed masked slot energies over a batch; also returns B."""
    bsz = len(questions)
    n_slots = max(slot_counts)
    h_enc = net.encode_batch(questions)
    logits = net.slot_logits_batch(h_enc, n_slots)
    probs = [ad.softmax(l) for l in logits]
    conds = slot_conditionals(gen, prefix_states, latent_inputs, probs, n_slots)
    total = Tensor(np.zeros(bsz))
    for m in range(n_slots):
        e_m = ad.mul(ad.sum_axis(ad.mul(probs[m], conds[m]), axis=1), -1.0)
        mask = np.array([1.0 if m < c else 0.0 for c in slot_counts])
        total = ad.add(total, ad.mul(e_m, Tensor(mask)))
    return ad.sum_all(total), bsz


def _example_latents(
    gen: GeneratorParams,
    data,
    prior: EBMPrior | None,
    cfg: LangevinConfig | None,
) -> np.ndarray | None:
    """Posterior latents of the serialized examples, or None for zeros."""
    if prior is None or cfg is None:
        return None
    seqs = [serialize_example(ex) for ex in data]
    return posterior_latents(gen, prior, seqs, cfg)


def train_inference(
    net: InferenceParams,
    gen: GeneratorParams,
    data,
    lr: float,
    epochs: int,
    seed: int = 0,
    batch_size: int = 16,
    method: str = "adam",
    prior: EBMPrior | None = None,
    cfg: LangevinConfig | None = None,
    slot_ramp: bool = True,
) -> float:
    """Descend summed slot energies over the data with the generator frozen.

    Each example contributes its first min(answer length, max_slots) slots;
    later slots are masked out. With slot_ramp, the first half of the epochs
    caps how many leading slots are active, growing the cap linearly to all
    slots; later slots only start training once earlier ones have sharpened,
    which keeps their soft-fed conditionals meaningful. The second half
    always trains the full masked energy.

    When a prior and chain config are supplied, each example's conditionals
    are computed at its posterior latent (one short-run chain per example,
    fixed across epochs); otherwise at a zero latent. Returns the mean
    per-example total energy evaluated after the last epoch.
    """
    if not data:
        raise ContractError("data must be nonempty")
    questions = [ex.question for ex in data]
    counts = [min(len(ex.answer), net.max_slots) for ex in data]
    prefixes = [question_prefix(ex.question) for ex in data]
    latents = _example_latents(gen, data, prior, cfg)
    max_count = max(counts)
    ramp = epochs // 2 if slot_ramp else 0
    gen.beta.freeze()
    try:
        states, zcs = generator_prefix_states(gen, prefixes, latents)
        n = len(data)
        for epoch in range(epochs):
            if epoch < ramp:
                cap = 1 + (epoch * max_count) // ramp
            else:
                cap = max_count
            order = make_rng(seed, "shuffle", epoch).permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                energy_sum, bsz = _batch_energy(
                    net,
                    gen,
                    [questions[i] for i in idx],
                    [min(counts[i], cap) for i in idx],
                    states[idx],
                    zcs[idx],
                )
                loss = ad.mul(energy_sum, 1.0 / bsz)
                net.psi.zero_grads()
                ad.backward(loss)
                optimizer_step(net.psi, lr, method=method)
        net.psi.freeze()
        try:
            energy_sum, _ = _batch_energy(net, gen, questions, counts, states, zcs)
            return energy_sum.item() / n
        finally:
            net.psi.unfreeze()
    finally:
        gen.beta.unfreeze()


def mean_energy(
    net: InferenceParams,
    gen: GeneratorParams,
    data,
    prior: EBMPrior | None = None,
    cfg: LangevinConfig | None = None,
) -> float:
    """Mean per-example total slot energy without touching any parameters."""
    if not data:
        raise ContractError("data must be nonempty")
    prefixes = [question_prefix(ex.question) for ex in data]
    latents = _example_latents(gen, data, prior, cfg)
    gen.beta.freeze()
    net.psi.freeze()
    try:
        states, zcs = generator_prefix_states(gen, prefixes, latents)
        energy_sum, _ = _batch_energy(
            net,
            gen,
            [ex.question for ex in data],
            [min(len(ex.answer), net.max_slots) for ex in data],
            states,
            zcs,
        )
        return energy_sum.item() / len(data)
    finally:
        net.psi.unfreeze()
        gen.beta.unfreeze()


def decode_slots(logits: np.ndarray, eos_id: int = EOS_ID) -> list[int]:
    """Per-slot argmax (ties to the lowest id), truncated after the first EOS."""
    out: list[int] = []
    for row in np.asarray(logits):
        tok = int(np.argmax(row))
        out.append(tok)
        if tok == eos_id:
            break
    return out


def predict_answer(net: InferenceParams, gen: GeneratorParams, x: list[int]) -> list[int]:
    """Decode the answer for a question from the slot logits.

    The decode is the inference net's per-slot argmax; the generator argument
    is accepted for call-site symmetry with training and evaluation.
    """
    net.psi.freeze()
    try:
        logits = infer(net, x).data
    finally:
        net.psi.unfreeze()
    return decode_slots(logits)
