"""QA-format tasks: vocabulary, synthetic suite, metrics, and dataset files.

Every task is a set of (question, answer) token-id pairs over one shared
closed vocabulary. The first four ids are reserved control tokens, in this
fixed order: PAD, EOS, SEP, GEN. Questions are "context SEP prompt";
answers always end with EOS.
"""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field

from .errors import ContractError, DataFormatError
from .rng import make_rng

PAD_ID = 0
EOS_ID = 1
SEP_ID = 2
GEN_ID = 3
RESERVED_TOKENS = ("<pad>", "<eos>", "<sep>", "<gen>")

_ARTICLES = frozenset({"a", "an", "the"})
_PUNCT = str.maketrans("", "", string.punctuation)


class Vocab:
    """Bijective token-string/id map with the four reserved control ids."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise ContractError(f"first four tokens must be {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise ContractError(f"unknown token {token!r}") from None

    def token(self, tid: int) -> str:
        if not 0 <= tid < len(self.tokens):
            raise ContractError(f"token id {tid} out of range")
        return self.tokens[tid]

    def encode(self, words: list[str]) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids: list[int], keep_control: bool = False) -> list[str]:
        toks = [self.token(i) for i in ids]
        if keep_control:
            return toks
        return [self.tokens[i] for i in ids if i > GEN_ID]

    @classmethod
    def build(cls, words: list[str]) -> "Vocab":
        seen: list[str] = []
        for w in words:
            if w not in seen and w not in RESERVED_TOKENS:
                seen.append(w)
        return cls(list(RESERVED_TOKENS) + seen)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


@dataclass
class QAExample:
    """One <question, answer> pair; the answer ends with EOS, PAD never appears."""

    question: list[int]
    answer: list[int]
    task_id: str

    def __post_init__(self):
        if not self.question or not self.answer:
            raise ContractError("question and answer must be nonempty")
        if PAD_ID in self.question or PAD_ID in self.answer:
            raise ContractError("PAD must not appear in question or answer")
        if self.answer[-1] != EOS_ID:
            raise ContractError("answer must end with EOS")


@dataclass
class Task:
    name: str
    train: list[QAExample]
    test: list[QAExample]
    metric: str  # "EM" or "nF1"

    def __post_init__(self):
        if self.metric not in ("EM", "nF1"):
            raise ContractError(f"metric must be EM or nF1, got {self.metric!r}")


def to_qa_format(
    vocab: Vocab,
    context: list[str],
    prompt: list[str],
    answer: list[str],
    task_id: str,
) -> QAExample:
    """Build an example: question = context SEP prompt, answer = gold EOS."""
    if not context or not prompt:
        raise ContractError("context and prompt must be nonempty")
    if not answer:
        raise ContractError("answer must be nonempty")
    question = vocab.encode(context) + [SEP_ID] + vocab.encode(prompt)
    return QAExample(question=question, answer=vocab.encode(answer) + [EOS_ID], task_id=task_id)


def serialize_example(example: QAExample) -> list[int]:
    """Generator-side layout of one pair: GEN question SEP answer."""
    return [GEN_ID] + list(example.question) + [SEP_ID] + list(example.answer)


def question_prefix(question: list[int]) -> list[int]:
    """Generator-side conditioning prefix for answering: GEN question SEP."""
    return [GEN_ID] + list(question) + [SEP_ID]


# ---------------------------------------------------------------------------
# metrics


def normalize_words(words: list[str]) -> list[str]:
    """SQuAD-style: lowercase, strip punctuation, drop articles and empties."""
    out = []
    for w in words:
        w = w.lower().translate(_PUNCT).strip()
        if w and w not in _ARTICLES:
            out.append(w)
    return out


def _normalized(vocab: Vocab, ids: list[int]) -> list[str]:
    return normalize_words(vocab.decode(ids))


def metric_em(vocab: Vocab, pred: list[int], gold: list[int]) -> float:
    """100 if the normalized token sequences match exactly, else 0."""
    return 100.0 if _normalized(vocab, pred) == _normalized(vocab, gold) else 0.0


def metric_nf1(vocab: Vocab, pred: list[int], gold: list[int]) -> float:
    """Token-bag F1 x 100 after normalization."""
    p = _normalized(vocab, pred)
    g = _normalized(vocab, gold)
    if not p and not g:
        return 100.0
    if not p or not g:
        return 0.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision = common / len(p)
    recall = common / len(g)
    return 200.0 * precision * recall / (precision + recall)


METRICS = {"EM": metric_em, "nF1": metric_nf1}


# ---------------------------------------------------------------------------
# synthetic suite

_POS_WORDS = ["good", "great", "fine", "superb", "lovely"]
_NEG_WORDS = ["bad", "awful", "poor", "dull", "weak"]
_FILLERS = ["the", "movie", "was", "plot", "and", "acting", "film", "story"]
_POLARITY_PROMPT = ["what", "is", "the", "sentiment", "?"]
_POLARITY_ANSWERS = ["positive", "negative"]

_COLORS = ["red", "blue", "green", "yellow"]
_OBJECTS = ["apple", "pear", "plum", "grape"]
_ORDINALS = ["first", "second", "third"]

_AREAS = ["north", "south", "east", "west", "centre"]
_FOODS = ["italian", "chinese", "thai", "indian"]
_PRICES = ["cheap", "moderate", "expensive"]
_STATE_PROMPT = ["what", "is", "the", "state", "?"]


def suite_vocab() -> Vocab:
    words: list[str] = []
    words += _POS_WORDS + _NEG_WORDS + _FILLERS + _POLARITY_PROMPT + _POLARITY_ANSWERS
    words += _COLORS + _OBJECTS + _ORDINALS + ["color", "item"]
    words += _AREAS + _FOODS + _PRICES + _STATE_PROMPT
    words += ["i", "want", "in", "food", "price", "area"]
    vocab = Vocab.build(words)
    assert len(vocab) <= 64, f"suite vocabulary too large: {len(vocab)}"
    return vocab


def _polarity_item(rng, vocab: Vocab, label: str) -> QAExample:
    majority = _POS_WORDS if label == "positive" else _NEG_WORDS
    minority = _NEG_WORDS if label == "positive" else _POS_WORDS
    n_major = int(rng.integers(2, 4))
    n_minor = int(rng.integers(0, n_major))
    n_fill = int(rng.integers(2, 5))
    words = (
        [majority[int(i)] for i in rng.integers(0, len(majority), n_major)]
        + [minority[int(i)] for i in rng.integers(0, len(minority), n_minor)]
        + [_FILLERS[int(i)] for i in rng.integers(0, len(_FILLERS), n_fill)]
    )
    order = rng.permutation(len(words))
    context = [words[int(i)] for i in order]
    return to_qa_format(vocab, context, _POLARITY_PROMPT, [label], "polarity")


def _span_item(rng, vocab: Vocab) -> QAExample:
    objs = [_OBJECTS[int(i)] for i in rng.permutation(len(_OBJECTS))[:3]]
    cols = [_COLORS[int(i)] for i in rng.permutation(len(_COLORS))[:3]]
    context = []
    for c, o in zip(cols, objs):
        context += [c, o]
    if rng.integers(0, 2) == 0:
        pick = int(rng.integers(0, 3))
        prompt = ["what", "color", "is", "the", objs[pick], "?"]
        answer = [cols[pick]]
    else:
        pick = int(rng.integers(0, 3))
        prompt = ["what", "is", "the", _ORDINALS[pick], "item", "?"]
        answer = [cols[pick], objs[pick]]
    return to_qa_format(vocab, context, prompt, answer, "span")


def _state_item(rng, vocab: Vocab) -> QAExample:
    # one or two slots mentioned, never all three
    kinds = ["food", "price", "area"]
    picked = [kinds[int(i)] for i in rng.permutation(3)[: int(rng.integers(1, 3))]]
    slots: dict[str, str] = {}
    for kind in picked:
        pool = {"food": _FOODS, "price": _PRICES, "area": _AREAS}[kind]
        slots[kind] = pool[int(rng.integers(0, len(pool)))]
    context = ["i", "want"]
    if "food" in slots:
        context += [slots["food"], "food"]
    if "price" in slots:
        context += [slots["price"], "price"]
    if "area" in slots:
        context += ["in", "the", slots["area"]]
    answer: list[str] = []
    for key in sorted(slots):
        answer += [key, slots[key]]
    return to_qa_format(vocab, context, _STATE_PROMPT, answer, "state")


def _fill_split(make, n: int, taken: set[tuple[int, ...]], limit: int = 200000) -> list[QAExample]:
    """Accept distinct-question examples from make(accepted_count) until n."""
    out: list[QAExample] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > limit:
            raise ContractError("could not generate enough distinct examples")
        ex = make(len(out))
        key = tuple(ex.question)
        if key in taken:
            continue
        taken.add(key)
        out.append(ex)
    return out


def make_synthetic_suite(
    seed: int,
    train_size: int = 30,
    test_size: int = 20,
) -> tuple[Vocab, list[Task]]:
    """Three distinguishable desk-scale tasks over one shared vocabulary.

    polarity: majority-sentiment classification (EM); span: extract a color
    or color-item pair from the context (nF1); state: canonical sorted
    key-value dialogue state (EM). Train and test splits are disjoint by
    question; output is a pure function of (seed, sizes).
    """
    if train_size < 20 or test_size < 20:
        raise ContractError(f"sizes must be >= 20 per split, got {train_size}/{test_size}")
    vocab = suite_vocab()
    tasks = []
    for name, metric, item in (
        ("polarity", "EM", None),
        ("span", "nF1", _span_item),
        ("state", "EM", _state_item),
    ):
        rng = make_rng(seed, "suite", name)
        taken: set[tuple[int, ...]] = set()
        if name == "polarity":
            # label alternates with the accepted count, so each split is balanced
            make = lambda i: _polarity_item(rng, vocab, _POLARITY_ANSWERS[i % 2])
        else:
            make = lambda i: item(rng, vocab)
        train = _fill_split(make, train_size, taken)
        test = _fill_split(make, test_size, taken)
        tasks.append(Task(name=name, train=train, test=test, metric=metric))
    return vocab, tasks


# ---------------------------------------------------------------------------
# dataset files (JSON Lines; one object per example)


def save_dataset(path, examples: list[QAExample], vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {
                        "question": " ".join(vocab.decode(ex.question, keep_control=True)),
                        "answer": " ".join(vocab.decode(ex.answer, keep_control=True)),
                        "task": ex.task_id,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_dataset(path, vocab: Vocab) -> list[QAExample]:
    out: list[QAExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON ({err.msg})") from None
            for fld in ("question", "answer", "task"):
                if fld not in obj:
                    raise DataFormatError(f"{path}:{lineno}: missing field {fld!r}")
            try:
                question = [vocab.id(w) for w in obj["question"].split()]
                answer = [vocab.id(w) for w in obj["answer"].split()]
                out.append(QAExample(question=question, answer=answer, task_id=obj["task"]))
            except ContractError as err:
                raise DataFormatError(f"{path}:{lineno}: {err}") from None
    return out
