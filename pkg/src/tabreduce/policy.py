"""Autoregressive pointer policy over candidate items plus a STOP action.

The policy scores each remaining candidate j against the question encoding
``q`` and the mean encoding ``h`` of already-selected items:

    score(j)    = q . Wq . v_j  +  h . Wh . v_j
    score(STOP) = q . sq  +  h . sh  +  sb

followed by a softmax over the remaining candidates (ascending index order)
with STOP in the final slot.  ``q`` and each candidate encoding ``v_j`` are
means of token embeddings; ``h`` is the zero vector before anything is
selected.  A linear value head ``q . vq + h . vh + vb`` shares the
embeddings.

Log-probabilities are exact and every gradient here is written by hand;
``finite_difference_error`` checks them against central differences, which
the test suite runs for both the likelihood loss and the clipped-surrogate
loss.  All sampling goes through caller-supplied generators, so identical
seeds give identical episodes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError

STOP = -1

MODEL_FORMAT_VERSION = 1

_WORD_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercased, punctuation-split words."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Token-to-index map; index 0 is reserved for out-of-vocabulary words."""

    tokens: tuple[str, ...]
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        lookup = {tok: i + 1 for i, tok in enumerate(self.tokens)}
        if len(lookup) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", lookup)

    @property
    def size(self) -> int:
        return len(self.tokens) + 1

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(self._index.get(tok, 0) for tok in tokenize(text))


def build_vocabulary(texts: Iterable[str]) -> Vocabulary:
    seen: set[str] = set()
    for text in texts:
        seen.update(tokenize(text))
    return Vocabulary(tuple(sorted(seen)))


@dataclass(frozen=True)
class EncodedInstance:
    """Tokenized question and candidate texts, ready for the policy."""

    question_ids: tuple[int, ...]
    candidate_ids: tuple[tuple[int, ...], ...]

    @property
    def n_candidates(self) -> int:
        return len(self.candidate_ids)


def encode_instance(vocab: Vocabulary, question: str, candidate_texts: Sequence[str]) -> EncodedInstance:
    return EncodedInstance(
        question_ids=vocab.encode(question),
        candidate_ids=tuple(vocab.encode(t) for t in candidate_texts),
    )


# ---------------------------------------------------------------------------
# Parameters

_PARAM_NAMES = (
    "emb", "score_q", "score_h", "stop_q", "stop_h", "stop_b",
    "value_q", "value_h", "value_b",
)


@dataclass
class PolicyParams:
    """All learnable arrays.  Scalars are shape-(1,) for uniform handling."""

    vocab: Vocabulary
    dim: int
    emb: np.ndarray       # (vocab.size, dim) token embeddings
    score_q: np.ndarray   # (dim, dim) question-candidate bilinear form
    score_h: np.ndarray   # (dim, dim) history-candidate bilinear form
    stop_q: np.ndarray    # (dim,)
    stop_h: np.ndarray    # (dim,)
    stop_b: np.ndarray    # (1,)
    value_q: np.ndarray   # (dim,)
    value_h: np.ndarray   # (dim,)
    value_b: np.ndarray   # (1,)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            vocab=self.vocab,
            dim=self.dim,
            **{name: getattr(self, name).copy() for name in _PARAM_NAMES},
        )

    def equals(self, other: "PolicyParams") -> bool:
        return self.vocab.tokens == other.vocab.tokens and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in _PARAM_NAMES
        )

    @classmethod
    def zeros(cls, vocab: Vocabulary, dim: int) -> "PolicyParams":
        return cls(
            vocab=vocab,
            dim=dim,
            emb=np.zeros((vocab.size, dim)),
            score_q=np.zeros((dim, dim)),
            score_h=np.zeros((dim, dim)),
            stop_q=np.zeros(dim),
            stop_h=np.zeros(dim),
            stop_b=np.zeros(1),
            value_q=np.zeros(dim),
            value_h=np.zeros(dim),
            value_b=np.zeros(1),
        )


def init_params(vocab: Vocabulary, dim: int = 64, seed: int = 0) -> PolicyParams:
    """Uniform(-0.1, 0.1) init for scoring parameters; value head starts at zero.

    Draw order is fixed (embeddings, bilinear forms, STOP weights) so a seed
    pins the exact parameter values.
    """
    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(-0.1, 0.1, size=shape)
    params = PolicyParams.zeros(vocab, dim)
    params.emb = u(vocab.size, dim)
    params.score_q = u(dim, dim)
    params.score_h = u(dim, dim)
    params.stop_q = u(dim)
    params.stop_h = u(dim)
    params.stop_b = u(1)
    return params


def zero_grads(params: PolicyParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.arrays().items()}


def save_params(params: PolicyParams, path, target: str | None = None) -> None:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "dim": params.dim,
        "vocabulary": list(params.vocab.tokens),
        "params": {
            name: [float(x) for x in arr.reshape(-1)]
            for name, arr in params.arrays().items()
        },
    }
    if target is not None:
        doc["target"] = target
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_params(path) -> tuple[PolicyParams, str | None]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ConfigError(f"unsupported model format: {doc.get('format_version')!r}")
    vocab = Vocabulary(tuple(doc["vocabulary"]))
    dim = int(doc["dim"])
    params = PolicyParams.zeros(vocab, dim)
    for name, arr in params.arrays().items():
        flat = np.asarray(doc["params"][name], dtype=float)
        if flat.size != arr.size:
            raise ConfigError(f"parameter {name!r} has wrong size {flat.size}")
        setattr(params, name, flat.reshape(arr.shape))
    return params, doc.get("target")


# ---------------------------------------------------------------------------
# Step-level math

def mean_embedding(emb: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    if not ids:
        return np.zeros(emb.shape[1])
    return emb[list(ids)].mean(axis=0)


def _softmax(scores: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(scores)):
        raise NumericalError("non-finite scores in step distribution")
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def step_distribution(
    params: PolicyParams,
    question_enc: np.ndarray,
    history_enc: np.ndarray,
    candidate_encs: np.ndarray,
) -> np.ndarray:
    """Probabilities over remaining candidates (given order) then STOP."""
    n = candidate_encs.shape[0] if candidate_encs.size else 0
    scores = np.empty(n + 1)
    if n:
        scores[:n] = (question_enc @ params.score_q) @ candidate_encs.T
        scores[:n] += (history_enc @ params.score_h) @ candidate_encs.T
    scores[n] = (
        question_enc @ params.stop_q + history_enc @ params.stop_h + params.stop_b[0]
    )
    return _softmax(scores)


def value_estimate(params: PolicyParams, question_enc: np.ndarray, history_enc: np.ndarray) -> float:
    return float(
        question_enc @ params.value_q + history_enc @ params.value_h + params.value_b[0]
    )


def apply_top_p_mask(probs: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest probability-descending prefix with cumulative >= p.

    Ties break toward the lower action index; surviving probabilities are
    renormalized.  p = 1.0 keeps everything.
    """
    probs = np.asarray(probs, dtype=float)
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"top-p must be in (0, 1], got {p}")
    if abs(float(probs.sum()) - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    order = np.lexsort((np.arange(probs.size), -probs))
    keep = np.zeros(probs.size, dtype=bool)
    cum = 0.0
    for idx in order:
        keep[idx] = True
        cum += probs[idx]
        if cum >= p:
            break
    masked = np.where(keep, probs, 0.0)
    return masked / masked.sum()


# ---------------------------------------------------------------------------
# Episodes

@dataclass(frozen=True)
class EpisodeTrace:
    """One rollout: actions (candidate indices, then STOP), per-step
    behavior/reference log-probabilities, value estimates, and the terminal
    task reward filled in by the caller.

    ``logp_pi`` is the behavior log-probability (top-p masked when sampling
    was masked); ``logp_pi_unmasked`` is the same action's log-probability
    under the unmasked policy, which the KL penalty and its measurement use.
    """

    actions: tuple[int, ...]
    logp_pi: tuple[float, ...]
    logp_pi_unmasked: tuple[float, ...]
    logp_ref: tuple[float, ...]
    values: tuple[float, ...]
    selected: frozenset[int]
    task_reward: float = 0.0

    def with_task_reward(self, reward: float) -> "EpisodeTrace":
        return replace(self, task_reward=reward)

    @property
    def total_logp_pi(self) -> float:
        return float(sum(self.logp_pi))

    @property
    def total_logp_ref(self) -> float:
        return float(sum(self.logp_ref))


class _Encoder:
    """Per-episode cache of q, candidate encodings and the history mean."""

    def __init__(self, params: PolicyParams, enc: EncodedInstance):
        self.params = params
        self.q = mean_embedding(params.emb, enc.question_ids)
        self.v = np.stack(
            [mean_embedding(params.emb, ids) for ids in enc.candidate_ids]
        ) if enc.n_candidates else np.zeros((0, params.dim))
        self._selected: list[int] = []
        self.h = np.zeros(params.dim)

    def select(self, candidate: int) -> None:
        self._selected.append(candidate)
        self.h = self.v[self._selected].mean(axis=0)

    def distribution(self, remaining: Sequence[int]) -> np.ndarray:
        return step_distribution(self.params, self.q, self.h, self.v[list(remaining)])


def sample_episode(
    params: PolicyParams,
    reference_params: PolicyParams | None,
    enc: EncodedInstance,
    mode: str = "sample",
    top_p: float | None = None,
    rng: np.random.Generator | None = None,
) -> EpisodeTrace:
    """Roll out one episode; selected candidates leave the action set.

    In sample mode the behavior distribution is the top-p-masked policy and
    the recorded logp_pi is its (masked) log-probability.  Greedy mode takes
    the unmasked argmax (masking never changes the argmax) with ties to the
    lowest action index.  logp_ref replays the same actions under the
    reference parameters without masking.
    """
    if mode not in ("sample", "greedy"):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ConfigError("sample mode needs a random generator")
    ref = reference_params if reference_params is not None else params
    pi = _Encoder(params, enc)
    theta = _Encoder(ref, enc)

    remaining = list(range(enc.n_candidates))
    actions: list[int] = []
    logp_pi: list[float] = []
    logp_pi_unmasked: list[float] = []
    logp_ref: list[float] = []
    values: list[float] = []

    while True:
        probs = pi.distribution(remaining)
        if mode == "sample" and top_p is not None:
            behavior = apply_top_p_mask(probs, top_p)
        else:
            behavior = probs
        if mode == "greedy":
            pick = int(np.argmax(probs))
        else:
            assert rng is not None
            pick = int(rng.choice(behavior.size, p=behavior))
        ref_probs = theta.distribution(remaining)

        values.append(value_estimate(params, pi.q, pi.h))
        logp_pi.append(float(np.log(behavior[pick])))
        logp_pi_unmasked.append(float(np.log(probs[pick])))
        logp_ref.append(float(np.log(ref_probs[pick])))

        if pick == len(remaining):  # STOP slot
            actions.append(STOP)
            break
        chosen = remaining.pop(pick)
        actions.append(chosen)
        pi.select(chosen)
        theta.select(chosen)

    return EpisodeTrace(
        actions=tuple(actions),
        logp_pi=tuple(logp_pi),
        logp_pi_unmasked=tuple(logp_pi_unmasked),
        logp_ref=tuple(logp_ref),
        values=tuple(values),
        selected=frozenset(a for a in actions if a != STOP),
    )


@dataclass
class Replay:
    """Teacher-forced forward pass over a fixed action sequence."""

    logps: np.ndarray       # (T,) log-probability of each taken action
    entropies: np.ndarray   # (T,) step distribution entropies
    values: np.ndarray      # (T,) value head outputs
    probs: list[np.ndarray]
    remaining: list[list[int]]
    histories: list[np.ndarray]
    selected_before: list[list[int]]


def replay_episode(params: PolicyParams, enc: EncodedInstance, actions: Sequence[int]) -> Replay:
    """Recompute per-step distributions for a given action sequence (no mask)."""
    encod = _Encoder(params, enc)
    remaining = list(range(enc.n_candidates))
    logps, entropies, values = [], [], []
    probs_seq: list[np.ndarray] = []
    remaining_seq: list[list[int]] = []
    histories: list[np.ndarray] = []
    selected_seq: list[list[int]] = []
    selected: list[int] = []

    for action in actions:
        probs = encod.distribution(remaining)
        if action == STOP:
            pick = len(remaining)
        else:
            if action not in remaining:
                raise ValueError(f"action {action} not available")
            pick = remaining.index(action)
        with np.errstate(divide="ignore"):
            logs = np.log(probs)
        logps.append(float(logs[pick]))
        entropies.append(float(-(probs * np.where(probs > 0, logs, 0.0)).sum()))
        values.append(value_estimate(params, encod.q, encod.h))
        probs_seq.append(probs)
        remaining_seq.append(list(remaining))
        histories.append(encod.h.copy())
        selected_seq.append(list(selected))
        if action == STOP:
            break
        remaining.remove(action)
        selected.append(action)
        encod.select(action)

    return Replay(
        logps=np.array(logps),
        entropies=np.array(entropies),
        values=np.array(values),
        probs=probs_seq,
        remaining=remaining_seq,
        histories=histories,
        selected_before=selected_seq,
    )


def sequence_logprob(params: PolicyParams, enc: EncodedInstance, actions: Sequence[int]) -> float:
    """Total unmasked log-probability of the action sequence."""
    return float(replay_episode(params, enc, actions).logps.sum())


def accumulate_episode_grads(
    params: PolicyParams,
    enc: EncodedInstance,
    actions: Sequence[int],
    replay: Replay,
    grads: dict[str, np.ndarray],
    logp_coef: np.ndarray,
    entropy_coef: np.ndarray,
    value_coef: np.ndarray,
) -> None:
    """Add d(sum_t logp_coef_t*logp_t + entropy_coef_t*H_t + value_coef_t*V_t)
    to ``grads``.  Backpropagates through scores, encodings, the shared
    history mean, and down to the token embeddings.
    """
    q = mean_embedding(params.emb, enc.question_ids)
    v = np.stack(
        [mean_embedding(params.emb, ids) for ids in enc.candidate_ids]
    ) if enc.n_candidates else np.zeros((0, params.dim))

    dq = np.zeros(params.dim)
    dv = np.zeros_like(v)

    for t, action in enumerate(actions[: len(replay.logps)]):
        remaining = replay.remaining[t]
        probs = replay.probs[t]
        h = replay.histories[t]
        pick = len(remaining) if action == STOP else remaining.index(action)

        dscores = np.zeros(probs.size)
        if logp_coef[t] != 0.0:
            dscores -= logp_coef[t] * probs
            dscores[pick] += logp_coef[t]
        if entropy_coef[t] != 0.0:
            with np.errstate(divide="ignore"):
                logs = np.where(probs > 0, np.log(probs), 0.0)
            dscores += entropy_coef[t] * (-probs * (logs + replay.entropies[t]))

        dh = np.zeros(params.dim)
        if remaining:
            g_vec = dscores[: len(remaining)]
            v_rem = v[remaining]
            gv = v_rem.T @ g_vec  # sum_j g_j v_j
            grads["score_q"] += np.outer(q, gv)
            grads["score_h"] += np.outer(h, gv)
            dq += params.score_q @ gv
            dh += params.score_h @ gv
            shared = params.score_q.T @ q + params.score_h.T @ h
            dv[remaining] += np.outer(g_vec, shared)
        g_stop = dscores[-1]
        if g_stop != 0.0:
            grads["stop_q"] += g_stop * q
            grads["stop_h"] += g_stop * h
            grads["stop_b"][0] += g_stop
            dq += g_stop * params.stop_q
            dh += g_stop * params.stop_h

        if value_coef[t] != 0.0:
            gv_t = value_coef[t]
            grads["value_q"] += gv_t * q
            grads["value_h"] += gv_t * h
            grads["value_b"][0] += gv_t
            dq += gv_t * params.value_q
            dh += gv_t * params.value_h

        selected = replay.selected_before[t]
        if selected and dh.any():
            share = dh / len(selected)
            for cand in selected:
                dv[cand] += share

    if enc.question_ids and dq.any():
        per_token = dq / len(enc.question_ids)
        for tok in enc.question_ids:
            grads["emb"][tok] += per_token
    for cand, ids in enumerate(enc.candidate_ids):
        if ids and dv[cand].any():
            per_token = dv[cand] / len(ids)
            for tok in ids:
                grads["emb"][tok] += per_token


# ---------------------------------------------------------------------------
# Losses

def sft_loss_and_grad(
    params: PolicyParams,
    batch: Sequence[tuple[EncodedInstance, Sequence[int]]],
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative log-likelihood of gold action sequences, with gradients."""
    if not batch:
        raise ConfigError("empty SFT batch")
    grads = zero_grads(params)
    total = 0.0
    scale = -1.0 / len(batch)
    for enc, actions in batch:
        replay = replay_episode(params, enc, actions)
        total += replay.logps.sum()
        steps = len(replay.logps)
        accumulate_episode_grads(
            params, enc, actions, replay, grads,
            logp_coef=np.full(steps, scale),
            entropy_coef=np.zeros(steps),
            value_coef=np.zeros(steps),
        )
    loss = -total / len(batch)
    if not np.isfinite(loss):
        raise NumericalError("non-finite SFT loss")
    return loss, grads


@dataclass(frozen=True)
class PpoExample:
    """One episode prepared for the clipped-surrogate update."""

    enc: EncodedInstance
    actions: tuple[int, ...]
    old_logps: np.ndarray     # behavior (masked) log-probs at collection time
    advantages: np.ndarray    # normalized, frozen
    returns: np.ndarray       # Monte-Carlo returns, frozen


@dataclass
class PpoStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    mean_ratio: float = 1.0


def ppo_loss_and_grad(
    params: PolicyParams,
    batch: Sequence[PpoExample],
    clip_epsilon: float,
    value_loss_coef: float,
    entropy_coef: float,
) -> tuple[float, dict[str, np.ndarray], PpoStats]:
    """Clipped-surrogate PPO loss over every step in the batch.

        loss = -mean(min(ratio*A, clip(ratio)*A))
               + value_loss_coef * mean((V - return)^2)
               - entropy_coef * mean(H)

    New log-probs are the unmasked policy; ratios divide by the stored
    behavior log-probs.  Steps where the clipped branch is strictly active
    contribute no policy gradient.
    """
    if not batch:
        raise ConfigError("empty PPO batch")
    grads = zero_grads(params)
    n_steps = sum(len(ex.old_logps) for ex in batch)
    pol_sum = 0.0
    val_sum = 0.0
    ent_sum = 0.0
    clipped = 0
    ratio_sum = 0.0

    for ex in batch:
        replay = replay_episode(params, ex.enc, ex.actions)
        steps = len(replay.logps)
        ratios = np.exp(replay.logps - ex.old_logps)
        if not np.all(np.isfinite(ratios)):
            raise NumericalError("non-finite PPO ratio")
        surr1 = ratios * ex.advantages
        surr2 = np.clip(ratios, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * ex.advantages
        take_unclipped = surr1 <= surr2
        pol_sum += -np.minimum(surr1, surr2).sum()
        clipped += int((~take_unclipped).sum())
        ratio_sum += ratios.sum()

        errors = replay.values - ex.returns
        val_sum += float((errors**2).sum())
        ent_sum += float(replay.entropies.sum())

        logp_coef = np.where(take_unclipped, -ratios * ex.advantages / n_steps, 0.0)
        value_coef = value_loss_coef * 2.0 * errors / n_steps
        ent_coef_vec = np.full(steps, -entropy_coef / n_steps)
        accumulate_episode_grads(
            params, ex.enc, ex.actions, replay, grads,
            logp_coef=logp_coef,
            entropy_coef=ent_coef_vec,
            value_coef=value_coef,
        )

    policy_loss = pol_sum / n_steps
    value_loss = val_sum / n_steps
    entropy = ent_sum / n_steps
    loss = policy_loss + value_loss_coef * value_loss - entropy_coef * entropy
    if not np.isfinite(loss):
        raise NumericalError("non-finite PPO loss")
    stats = PpoStats(
        policy_loss=policy_loss,
        value_loss=value_loss,
        entropy=entropy,
        clip_fraction=clipped / n_steps,
        mean_ratio=ratio_sum / n_steps,
    )
    return loss, grads, stats


# ---------------------------------------------------------------------------
# Gradient verification

def finite_difference_error(
    params: PolicyParams,
    value_and_grad: Callable[[PolicyParams], tuple[float, dict[str, np.ndarray]]],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, grads = value_and_grad(params)
    work = params.copy()
    worst = 0.0
    for name, arr in work.arrays().items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up, _ = value_and_grad(work)
            flat[i] = orig - epsilon
            down, _ = value_and_grad(work)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(1e-6, abs(gflat[i]), abs(numeric))
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


def grad_check(
    params: PolicyParams,
    enc: EncodedInstance,
    gold_actions: Sequence[int],
    epsilon: float = 1e-5,
    clip_epsilon: float = 0.2,
) -> float:
    """Finite-difference check of both loss gradients on one instance.

    The surrogate fixture shifts the stored behavior log-probs so some steps
    sit inside the clip region and others strictly outside it, exercising
    both branches away from the kink.
    """
    gold = tuple(gold_actions)

    def sft_fn(p: PolicyParams) -> tuple[float, dict[str, np.ndarray]]:
        return sft_loss_and_grad(p, [(enc, gold)])

    base = replay_episode(params, enc, gold)
    steps = len(base.logps)
    offsets = np.where(np.arange(steps) % 2 == 0, 0.1, 0.4)
    signs = np.where(np.arange(steps) % 3 == 0, -1.0, 1.0)
    example = PpoExample(
        enc=enc,
        actions=gold,
        old_logps=base.logps - offsets,
        advantages=signs * (1.0 + 0.25 * np.arange(steps)),
        returns=np.linspace(-1.0, 1.0, steps),
    )

    def ppo_fn(p: PolicyParams) -> tuple[float, dict[str, np.ndarray]]:
        loss, grads, _ = ppo_loss_and_grad(
            p, [example], clip_epsilon=clip_epsilon, value_loss_coef=0.5, entropy_coef=0.01
        )
        return loss, grads

    return max(
        finite_difference_error(params, sft_fn, epsilon),
        finite_difference_error(params, ppo_fn, epsilon),
    )
