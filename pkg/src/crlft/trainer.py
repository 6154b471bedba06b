"""Training objectives, reward-to-weight conversion, and the optimizer recipe.

Two objectives over rendered examples:

  sft_loss    token-normalized negative log-likelihood, weights ignored
  crlft_loss  reward-weighted regression: each example's masked log
              probabilities are scaled by exp((r - r_expert) / beta)
              (or by an explicit per-class table, the standard
              simplification being 1.0 for expert and 0.1 for
              sub-optimal), normalized by the weighted token count

Both losses are built on the autodiff graph, so analytic gradients flow
through either backend. The neural backend trains with AdamW under a
cosine learning-rate schedule whose maximum is scaled by the square
root of the batch size relative to a reference batch; the tabular
backend trains full batch with heavy-ball gradient descent, which
converges to the closed-form optimum the oracle computes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import ClassRegistry, Conversation, TabularInstance, assign_reward, to_tabular
from .errors import (
    EmptyBatch,
    InvalidConfig,
    NonPositiveWeight,
    ShapeMismatch,
    UnknownClass,
)
from .templating import (
    DEFAULT_VARIANT,
    PositionVariant,
    RenderedExample,
    SHARED_CLASS_SPEC,
    build_example,
)

OBJECTIVES = ("sft", "crlft")


@dataclass(frozen=True)
class WeightRule:
    """How per-class rewards become example weights."""

    mode: str  # "exp_reward" | "explicit_table"
    beta: float | None = None
    expert_reward: float | None = None
    table: dict[str, float] | None = None

    def __post_init__(self):
        if self.mode == "exp_reward":
            if self.beta is None or not self.beta > 0:
                raise InvalidConfig("exp_reward mode requires beta > 0")
            if self.expert_reward is None or not math.isfinite(self.expert_reward):
                raise InvalidConfig("exp_reward mode requires a finite expert reward")
        elif self.mode == "explicit_table":
            if not self.table:
                raise InvalidConfig("explicit_table mode requires a weight table")
            if any(not w > 0 for w in self.table.values()):
                raise InvalidConfig("table weights must be positive")
        else:
            raise InvalidConfig(f"unknown weight rule mode {self.mode!r}")

    @classmethod
    def exp_reward(cls, beta: float, expert_reward: float) -> "WeightRule":
        return cls(mode="exp_reward", beta=beta, expert_reward=expert_reward)

    @classmethod
    def explicit_table(cls, table: dict[str, float], expert_class: str) -> "WeightRule":
        if expert_class not in table:
            raise InvalidConfig("explicit table must include the expert class weight")
        return cls(mode="explicit_table", table=dict(table))

    @classmethod
    def from_registry(cls, registry: ClassRegistry, beta: float | None = None) -> "WeightRule":
        """Explicit table when every class declares a weight, else the
        exp rule normalized to the registry's expert reward."""
        if all(s.explicit_weight is not None for s in registry):
            return cls.explicit_table(
                {s.name: s.explicit_weight for s in registry}, registry.expert_class
            )
        if beta is None:
            raise InvalidConfig("registry lacks explicit weights; provide beta for the exp rule")
        return cls.exp_reward(beta, registry.expert_spec.reward)


def reward_weight(r: float, rule: WeightRule, class_name: str) -> float:
    """Example weight for a reward, normalized so the expert class gets 1."""
    if rule.mode == "exp_reward":
        return math.exp((r - rule.expert_reward) / rule.beta)
    try:
        return rule.table[class_name]
    except KeyError:
        raise UnknownClass(class_name) from None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_tokens: int = 2000
    ref_batch_tokens: int = 200_000
    max_lr: float = 0.3
    floor_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-5
    weight_decay: float = 0.1
    seed: int = 0
    objective: str = "crlft"
    no_reward: bool = False
    no_condition: bool = False
    variant: PositionVariant = DEFAULT_VARIANT
    weight_beta: float | None = None  # exp-rule beta when the registry has no table
    # tabular full-batch settings
    tabular_iters: int = 12_000
    tabular_lr: float = 0.5
    tabular_momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1 or self.batch_tokens < 1 or self.ref_batch_tokens < 1:
            raise InvalidConfig("epochs and batch sizes must be positive")
        if not self.max_lr > 0:
            raise InvalidConfig("max_lr must be positive")
        if not 0 < self.floor_fraction <= 1:
            raise InvalidConfig("floor_fraction must be in (0, 1]")
        if self.objective not in OBJECTIVES:
            raise InvalidConfig(f"objective must be one of {OBJECTIVES}")
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", PositionVariant(self.variant))


def lr_schedule(step: int, total_steps: int, max_lr: float, floor_fraction: float) -> float:
    """Cosine decay from max_lr to floor_fraction * max_lr."""
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    floor = floor_fraction * max_lr
    if total_steps == 0:
        return max_lr
    frac = step / total_steps
    return floor + (max_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


def scaled_lr(base_lr: float, batch_tokens: float, ref_batch_tokens: float) -> float:
    """Square-root batch-size scaling of the learning rate."""
    if base_lr <= 0 or batch_tokens <= 0 or ref_batch_tokens <= 0:
        raise ValueError("scaled_lr inputs must be positive")
    return base_lr * math.sqrt(batch_tokens / ref_batch_tokens)


# ---------------------------------------------------------------------------
# Losses


def _loss_graph(policy, examples: list[RenderedExample], weighted: bool) -> ad.Tensor:
    if not examples:
        raise EmptyBatch("loss needs a non-empty batch")
    weights = np.array(
        [ex.weight if weighted else 1.0 for ex in examples], dtype=np.float64
    )
    if np.any(weights <= 0):
        raise NonPositiveWeight("example weights must be positive")
    tok_lp, ex_idx, counts = policy.token_logprobs_graph(examples)
    denom = float((weights * counts).sum())
    return ad.scale(ad.tsum(ad.mul(tok_lp, weights[ex_idx])), -1.0 / denom)


def sft_loss(policy, examples: list[RenderedExample]) -> float:
    """Mean negative log-likelihood per masked token; ignores weights."""
    return float(_loss_graph(policy, examples, weighted=False).value)


def crlft_loss(policy, examples: list[RenderedExample]) -> float:
    """Weighted mean negative log-likelihood per weighted masked token.

    Reduces exactly to sft_loss when all weights are 1, and is invariant
    to rescaling every weight by a common positive constant.
    """
    return float(_loss_graph(policy, examples, weighted=True).value)


def loss_and_grads(policy, examples: list[RenderedExample], objective: str = "crlft"):
    """Loss value plus analytic parameter gradients (fresh copies)."""
    if objective not in OBJECTIVES:
        raise InvalidConfig(f"objective must be one of {OBJECTIVES}")
    for p in policy.parameters().values():
        p.zero_grad()
    loss = _loss_graph(policy, examples, weighted=objective == "crlft")
    ad.backward(loss)
    grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
        for name, p in policy.parameters().items()
    }
    for p in policy.parameters().values():
        p.zero_grad()
    return float(loss.value), grads


# ---------------------------------------------------------------------------
# Optimizer


class AdamW:
    """AdamW with decoupled weight decay over a named parameter dict."""

    def __init__(self, params, beta1=0.9, beta2=0.95, eps=1e-5, weight_decay=0.1):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p.value -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.value)


# ---------------------------------------------------------------------------
# Training loops


def _pack_batches(order, examples, batch_tokens: int) -> list[list[int]]:
    batches: list[list[int]] = []
    cur: list[int] = []
    cur_tokens = 0
    for i in order:
        t = len(examples[i])
        if cur and cur_tokens + t > batch_tokens:
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(int(i))
        cur_tokens += t
    if cur:
        batches.append(cur)
    return batches


def fit_examples(policy, examples: list[RenderedExample], config: TrainConfig) -> list[dict]:
    """Minibatch AdamW over rendered examples; reshuffles each epoch with
    a seeded order and records one metrics row per epoch."""
    if not examples:
        raise EmptyBatch("cannot train on an empty example list")
    rng = np.random.default_rng(config.seed)
    plan = [
        _pack_batches(rng.permutation(len(examples)), examples, config.batch_tokens)
        for _ in range(config.epochs)
    ]
    total_steps = sum(len(b) for b in plan)
    eff_max_lr = scaled_lr(config.max_lr, config.batch_tokens, config.ref_batch_tokens)
    opt = AdamW(
        policy.parameters(),
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    weighted = config.objective == "crlft"
    metrics: list[dict] = []
    step = 0
    lr = eff_max_lr
    for epoch, batches in enumerate(plan):
        epoch_losses = []
        for batch in batches:
            lr = lr_schedule(step, max(total_steps - 1, 1), eff_max_lr, config.floor_fraction)
            opt.zero_grad()
            loss = _loss_graph(policy, [examples[i] for i in batch], weighted=weighted)
            ad.backward(loss)
            opt.step(lr)
            epoch_losses.append(float(loss.value))
            step += 1
        opt.zero_grad()
        metrics.append(
            {
                "epoch": epoch,
                "step": step,
                "loss": float(np.mean(epoch_losses)),
                "lr": lr,
                "objective": config.objective,
                "flags": {"no_reward": config.no_reward, "no_condition": config.no_condition},
            }
        )
    return metrics


def cell_weights_from_rewards(
    instance: TabularInstance, rewards: np.ndarray, beta: float
) -> np.ndarray:
    """Count-weighted exp(r / beta) factors, stabilized per slice.

    Each (x, c) slice subtracts its maximum supported reward inside the
    exponential, which leaves the per-slice minimizer unchanged.
    """
    if not beta > 0:
        raise InvalidConfig("beta must be positive")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != instance.counts.shape:
        raise ShapeMismatch(f"rewards shape {rewards.shape} != counts shape {instance.counts.shape}")
    support = instance.counts > 0
    masked = np.where(support, rewards, -np.inf)
    slice_max = masked.max(axis=2, keepdims=True)
    slice_max = np.where(np.isfinite(slice_max), slice_max, 0.0)
    return instance.counts * np.where(support, np.exp((rewards - slice_max) / beta), 0.0)


def cell_weights_from_rule(
    instance: TabularInstance, registry: ClassRegistry, rule: WeightRule
) -> np.ndarray:
    """Counts scaled by each class's scalar weight (class-constant rewards)."""
    class_w = np.array(
        [reward_weight(registry.spec(c).reward, rule, c) for c in instance.c_labels]
    )
    return instance.counts * class_w[None, :, None]


def fit_tabular(
    policy,
    instance: TabularInstance,
    rewards: np.ndarray | None = None,
    beta: float | None = None,
    cell_weights: np.ndarray | None = None,
    iters: int = 12_000,
    lr: float = 0.5,
    momentum: float = 0.9,
    record_every: int = 2_000,
) -> list[dict]:
    """Full-batch gradient descent on the weighted regression objective.

    The gradient of each active slice is softmax(logits) minus the
    slice-normalized cell weights (a per-slice diagonal preconditioning
    of the crlft loss gradient, which shares its unique minimizer);
    heavy-ball momentum accelerates the tail. Deterministic for a fixed
    iteration count. Inactive slices are left untouched.
    """
    if cell_weights is None:
        if rewards is None or beta is None:
            raise InvalidConfig("provide rewards and beta, or explicit cell weights")
        cell_weights = cell_weights_from_rewards(instance, rewards, beta)
    cell_weights = np.asarray(cell_weights, dtype=np.float64)
    logits = policy.params["logits"].value
    if cell_weights.shape != logits.shape:
        raise ShapeMismatch(
            f"cell weights shape {cell_weights.shape} != policy shape {logits.shape}"
        )
    slice_w = cell_weights.sum(axis=2, keepdims=True)
    active = slice_w[..., 0] > 0
    target = np.where(slice_w > 0, cell_weights / np.where(slice_w > 0, slice_w, 1.0), 0.0)
    total_w = float(cell_weights.sum())
    if total_w <= 0:
        raise EmptyBatch("all cell weights are zero")

    def weighted_loss() -> float:
        z = logits - logits.max(axis=2, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=2, keepdims=True))
        return float(-(cell_weights * logp).sum() / total_w)

    velocity = np.zeros_like(logits)
    metrics: list[dict] = []
    for it in range(iters):
        z = np.exp(logits - logits.max(axis=2, keepdims=True))
        p = z / z.sum(axis=2, keepdims=True)
        grad = np.where(active[..., None], p - target, 0.0)
        velocity = momentum * velocity - lr * grad
        logits += velocity
        if (it + 1) % record_every == 0 or it + 1 == iters:
            metrics.append(
                {
                    "epoch": it + 1,
                    "step": it + 1,
                    "loss": weighted_loss(),
                    "lr": lr,
                    "objective": "crlft",
                    "flags": {"no_reward": False, "no_condition": False},
                }
            )
    return metrics


def build_training_examples(
    corpus: list[Conversation],
    registry: ClassRegistry,
    config: TrainConfig,
    vocab,
) -> list[RenderedExample]:
    """Render a corpus into weighted training examples per the config flags."""
    if config.objective == "sft" or config.no_reward:
        rule = None
    else:
        rule = WeightRule.from_registry(registry, beta=config.weight_beta)
    examples = []
    for conv in corpus:
        spec = SHARED_CLASS_SPEC if config.no_condition else registry.spec(conv.source_class)
        if rule is None:
            weight = 1.0
        else:
            weight = reward_weight(assign_reward(conv, registry), rule, conv.source_class)
        examples.append(build_example(conv, spec, config.variant, vocab, weight))
    return examples


def train(policy, corpus: list[Conversation], registry: ClassRegistry, config: TrainConfig):
    """Train a policy on a class-labeled corpus; returns the metrics series.

    Neural policies train with minibatch AdamW on rendered examples.
    Tabular policies collapse the corpus to counts (registry class order)
    and run the full-batch loop; their index sets must match the corpus.
    """
    if not corpus:
        raise EmptyBatch("training corpus is empty")
    if config.objective == "crlft" and not config.no_condition and len(registry) < 2:
        raise InvalidConfig("conditioned reward-weighted runs need at least 2 classes")
    if policy.backend == "neural":
        examples = build_training_examples(corpus, registry, config, policy.vocab)
        return fit_examples(policy, examples, config)
    instance = to_tabular(corpus, classes=registry.names)
    if instance.shape != policy.shape:
        raise ShapeMismatch(
            f"corpus instance shape {instance.shape} != policy shape {policy.shape}"
        )
    if config.objective == "sft" or config.no_reward:
        cell_weights = instance.counts.copy()
    else:
        rule = WeightRule.from_registry(registry, beta=config.weight_beta)
        cell_weights = cell_weights_from_rule(instance, registry, rule)
    return fit_tabular(
        policy,
        instance,
        cell_weights=cell_weights,
        iters=config.tabular_iters,
        lr=config.tabular_lr,
        momentum=config.tabular_momentum,
    )
