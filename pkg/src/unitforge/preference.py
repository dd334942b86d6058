"""CTC-DPO: direct preference optimization over CTC marginal likelihoods
with a frozen reference decoder.

The policy likelihood of a unit sequence is the CTC marginal of the NAR
decoder's output distribution; the text-guided module is bypassed (no
ground-truth text exists for preference rollouts).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ctc import UnitSequence, ctc_loss
from .data import decode_f32
from .decoder import SpeechDecoder
from .errors import ContractError
from .tensor import AdamW, Tensor, warmup_lr


@dataclass
class PreferencePair:
    context_features: np.ndarray
    y_w: UnitSequence
    y_l: UnitSequence
    emotion: str
    lang: str = "a"

    def __post_init__(self):
        if not isinstance(self.y_w, UnitSequence):
            self.y_w = UnitSequence(self.y_w)
        if not isinstance(self.y_l, UnitSequence):
            self.y_l = UnitSequence(self.y_l)
        if self.y_w.units == self.y_l.units:
            raise ContractError("preference pair needs distinct winner/loser")


@dataclass
class DpoConfig:
    beta: float = 0.1
    reference_checkpoint: str | None = None

    def __post_init__(self):
        if self.beta <= 0:
            raise ContractError("DPO beta must be > 0")


def pairs_from_records(records) -> list:
    return [
        PreferencePair(
            context_features=decode_f32(rec["features"]),
            y_w=UnitSequence(rec["units_w"]),
            y_l=UnitSequence(rec["units_l"]),
            emotion=rec["emotion"],
            lang=rec.get("lang", "a"),
        )
        for rec in records
    ]


def policy_log_likelihood(model: SpeechDecoder, context, y) -> Tensor:
    """log pi(y | x) = -ctc_loss of the decoder's log-probs (TGM bypassed)."""
    log_probs = model.nar_forward(context)  # no text: inference pathway
    return T.scale(ctc_loss(log_probs, y), -1.0)


def _pair_log_likelihoods(model: SpeechDecoder, pair: PreferencePair):
    """One forward pass per context; both sequences scored off it."""
    log_probs = model.nar_forward(pair.context_features)
    ll_w = T.scale(ctc_loss(log_probs, pair.y_w), -1.0)
    ll_l = T.scale(ctc_loss(log_probs, pair.y_l), -1.0)
    return ll_w, ll_l


def _assert_frozen(reference: SpeechDecoder):
    if any(p.requires_grad for p in reference.parameters().values()):
        raise ContractError("reference decoder must be frozen for DPO")


def ctc_dpo_loss(policy: SpeechDecoder, reference: SpeechDecoder,
                 pair: PreferencePair, beta: float) -> Tensor:
    """-log sigmoid(beta * ((llw* - llw_ref) - (lll* - lll_ref)))."""
    _assert_frozen(reference)
    ll_w, ll_l = _pair_log_likelihoods(policy, pair)
    with T.no_grad():
        ref_w, ref_l = _pair_log_likelihoods(reference, pair)
    margin = T.scale(
        T.sub(T.sub(ll_w, Tensor(ref_w.data)), T.sub(ll_l, Tensor(ref_l.data))),
        beta,
    )
    return T.softplus(T.scale(margin, -1.0))


def pair_margin(policy: SpeechDecoder, reference: SpeechDecoder,
                pair: PreferencePair) -> float:
    with T.no_grad():
        ll_w, ll_l = _pair_log_likelihoods(policy, pair)
        ref_w, ref_l = _pair_log_likelihoods(reference, pair)
    return (ll_w.item() - ref_w.item()) - (ll_l.item() - ref_l.item())


def preference_accuracy(policy: SpeechDecoder, pairs) -> float:
    """Fraction of pairs where the policy prefers the winner."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("preference_accuracy: empty pair set")
    wins = 0
    with T.no_grad():
        for pair in pairs:
            ll_w, ll_l = _pair_log_likelihoods(policy, pair)
            if ll_w.item() > ll_l.item():
                wins += 1
    return wins / len(pairs)


@dataclass
class DpoSchedule:
    lr: float = 5e-4
    steps: int = 200
    batch: int = 8
    warmup_ratio: float = 0.3
    seed: int = 0
    log_every: int = 20


def train_dpo(policy: SpeechDecoder, reference: SpeechDecoder, pairs,
              config: DpoConfig, schedule: DpoSchedule):
    """Returns metrics rows [(step, loss, mean_margin, pref_accuracy)].

    The reference stays frozen; only policy parameters move.
    """
    _assert_frozen(reference)
    pairs = list(pairs)
    # the text-conditioning pathway is bypassed here, so the fusion module
    # and text embedding never receive gradients
    params = {k: v for k, v in policy.parameters().items()
              if not k.startswith(("tgm.", "txt."))}
    opt = AdamW(params, lr=schedule.lr)
    rng = np.random.default_rng(schedule.seed)
    metrics = []
    for step in range(schedule.steps):
        T.reset_tape()
        idx = rng.choice(len(pairs), size=min(schedule.batch, len(pairs)),
                         replace=False)
        loss = None
        for i in idx:
            term = ctc_dpo_loss(policy, reference, pairs[i], config.beta)
            loss = term if loss is None else T.add(loss, term)
        loss = T.scale(loss, 1.0 / len(idx))
        opt.zero_grad()
        T.backward(loss)
        lr = warmup_lr(schedule.lr, step + 1, schedule.steps,
                       schedule.warmup_ratio)
        opt.step(lr=lr)
        if step % schedule.log_every == 0 or step == schedule.steps - 1:
            margins = [pair_margin(policy, reference, p) for p in pairs]
            acc = preference_accuracy(policy, pairs)
            metrics.append((step, float(loss.item()),
                            float(np.mean(margins)), acc))
        else:
            metrics.append((step, float(loss.item()), math.nan, math.nan))
    T.reset_tape()
    return metrics
