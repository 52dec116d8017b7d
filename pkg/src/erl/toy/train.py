"""Training loop comparing sparse-reward PPO with ERL on a synthetic world.

``ppo_sparse`` rolls out with erasure disabled and rewards only the final
answer. ``erl`` rolls out with erasure on and uses every kept stage reward.
Both share the PPO update, the value baseline and sampled evaluation with
erasure disabled, so only the training signal differs.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..corpus import Document, TfIdfIndex, build_index
from ..erasure import ErasureConfig
from ..metrics import exact_match, token_f1
from ..rollout import EngineConfig, Episode, PolicyStage, QAExample, run_episode
from .policy import SoftmaxPolicy, ToyAgent, action_space
from .ppo import AdvantageBatch, PPOConfig, TrainingDiverged, compute_gae, ppo_update
from .world import make_world

log = logging.getLogger(__name__)

ALGOS = ("ppo_sparse", "erl")
INFO_STAGE = "information"


@dataclass(frozen=True)
class TrainConfig:
    algo: str = "erl"
    clip_epsilon: float = 0.2
    kl_coefficient: float = 1e-3
    gamma: float = 1.0
    gae_lambda: float = 0.95
    learning_rate: float = 0.05
    epochs: int = 4
    batch_size: int = 16
    iterations: int = 300
    eval_every: int = 50
    seed: int = 0
    top_k: int = 1  # k >= 2 re-retrieves the bridge document and penalizes correct hops
    max_rounds: int = 0  # 0 means hop depth + 2
    value_rate: float = 0.1
    parallel: int = 1
    eval_samples: int = 8
    erasure: ErasureConfig = field(default_factory=ErasureConfig)

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algo {self.algo!r}; expected one of {', '.join(ALGOS)}")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be > 0")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_every < 1 or self.epochs < 1:
            raise ValueError("batch_size, eval_every and epochs must be positive; iterations >= 0")

    @property
    def ppo(self) -> PPOConfig:
        return PPOConfig(self.clip_epsilon, self.kl_coefficient, self.learning_rate, self.epochs)


@dataclass
class TrainResult:
    algo: str
    seed: int
    curve: list[dict]
    policy: SoftmaxPolicy

    @property
    def final_em(self) -> float:
        return self.curve[-1]["em"]

    def curve_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.curve)


@dataclass
class Step:
    key: tuple
    action: int
    old_log_prob: float
    reward: float
    mask: bool


def episode_steps(episode: Episode, agent: ToyAgent, sparse: bool) -> list[Step]:
    """Kept decisions of one episode with their rewards, plus masked information steps.

    Erased attempts are left out: they are not part of the trajectory the
    policy is trained on, only of the attempt log.
    """
    if len(agent.decisions) != len(episode.attempt_log):
        raise RuntimeError("agent decisions and attempt log are out of step")
    steps: list[Step] = []
    for dec, rec in zip(agent.decisions, episode.attempt_log):
        if not rec.kept:
            continue
        is_answer = rec.stage is PolicyStage.ANSWER_OR_SEARCH and dec.text.startswith("<answer>")
        if sparse:
            reward = rec.reward if is_answer else 0.0
        else:
            reward = rec.reward or 0.0
        steps.append(Step(dec.key, dec.action, dec.log_prob, float(reward), True))
        if rec.stage in (PolicyStage.SEARCH, PolicyStage.ANSWER_OR_SEARCH) and not is_answer:
            steps.append(Step((rec.round, INFO_STAGE), -1, 0.0, 0.0, False))
    return steps


class Trainer:
    def __init__(self, corpus: Sequence[Document], dataset: Sequence[QAExample], config: TrainConfig,
                 relations: Sequence[str], hop_depth: int, index: Optional[TfIdfIndex] = None):
        self.config = config
        self.dataset = list(dataset)
        self.index = index or build_index(corpus)
        self.actions = action_space(relations, config.top_k)
        max_rounds = config.max_rounds or hop_depth + 2
        erasure = config.erasure if config.algo == "erl" else replace(config.erasure, enabled=False)
        self.engine = EngineConfig(config.top_k, max_rounds, erasure)
        self.eval_engine = EngineConfig(config.top_k, max_rounds, replace(erasure, enabled=False))
        self.policy = SoftmaxPolicy({s: len(a) for s, a in self.actions.items()})
        self.ref = self.policy.copy()
        self.values: dict = {}

    def _rollout(self, example: QAExample, agent: ToyAgent, engine: EngineConfig) -> Episode:
        return run_episode(example, agent, engine, self.index)

    def _map(self, fn, items):
        if self.config.parallel > 1:
            with ThreadPoolExecutor(self.config.parallel) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def collect(self, iteration: int) -> tuple[list[list[Step]], list[Episode]]:
        cfg = self.config
        pick = np.random.default_rng([cfg.seed, iteration]).integers(0, len(self.dataset), cfg.batch_size)
        agents = [ToyAgent(self.policy, self.actions, np.random.default_rng([cfg.seed, iteration, j]))
                  for j in range(cfg.batch_size)]
        # touch every logit row first so worker threads only read the table
        for r in range(1, self.engine.max_rounds + 1):
            for s in self.actions:
                self.policy.logits((r, s))
                self.ref.logits((r, s))
        episodes = self._map(lambda j: self._rollout(self.dataset[pick[j]], agents[j], self.engine),
                             range(cfg.batch_size))
        sparse = cfg.algo == "ppo_sparse"
        return [episode_steps(ep, ag, sparse) for ep, ag in zip(episodes, agents)], episodes

    def build_batch(self, trajectories: list[list[Step]]) -> AdvantageBatch:
        """One batch; the surrogate is normalized by the trajectory count."""
        cfg = self.config
        keys, actions, olp, rets, advs, masks = [], [], [], [], [], []
        for steps in trajectories:
            rewards = [s.reward for s in steps]
            values = [self.values.get(s.key, 0.0) for s in steps]
            m = [s.mask for s in steps]
            adv, ret = compute_gae(rewards, values, cfg.gamma, cfg.gae_lambda, m)
            for s, a, r in zip(steps, adv, ret):
                keys.append(s.key)
                actions.append(s.action)
                olp.append(s.old_log_prob)
                rets.append(r)
                advs.append(a)
                masks.append(s.mask)
        return AdvantageBatch(keys, np.array(actions), np.array(olp), np.array(rets),
                              np.array(advs), np.array(masks, dtype=bool), float(len(trajectories)))

    def _update_values(self, batch: AdvantageBatch) -> None:
        rate = self.config.value_rate
        for key, ret, live in zip(batch.keys, batch.returns, batch.masks):
            if live:
                v = self.values.get(key, 0.0)
                self.values[key] = v + rate * (ret - v)

    def evaluate(self, checkpoint: int) -> dict:
        """Sampled (not greedy) rollouts with erasure off: ``eval_samples`` per example.

        Sampling measures the learned distribution; argmax over a near-uniform
        table would mostly measure the action ordering.
        """
        cfg = self.config
        jobs = [(ex, ToyAgent(self.policy, self.actions, np.random.default_rng([cfg.seed, 7919, checkpoint, i, j])))
                for i, ex in enumerate(self.dataset) for j in range(cfg.eval_samples)]
        episodes = self._map(lambda job: self._rollout(job[0], job[1], self.eval_engine), jobs)
        answers = [ep.final_answer or "" for ep in episodes]
        golds = [ex.golden_answers for ex, _ in jobs]
        return {
            "em": float(np.mean([exact_match(a, g) for a, g in zip(answers, golds)])),
            "f1": float(np.mean([token_f1(a, g) for a, g in zip(answers, golds)])),
            "eval_reward": float(np.mean([ep.total_reward for ep in episodes])),
        }

    def run(self) -> TrainResult:
        cfg = self.config
        curve = [{"checkpoint": 0, "iteration": 0, "mean_reward": 0.0, "clip_fraction": 0.0,
                  "kl": 0.0, "mean_ratio": 1.0, "erasures": 0, **self.evaluate(0)}]
        window: list[dict] = []
        for it in range(1, cfg.iterations + 1):
            trajectories, episodes = self.collect(it)
            batch = self.build_batch(trajectories)
            try:
                self.policy, diag = ppo_update(self.policy, batch, self.ref, cfg.ppo)
            except TrainingDiverged as exc:
                exc.last_policy = self.policy
                exc.curve = curve
                raise
            self._update_values(batch)
            window.append({"mean_reward": float(np.mean([sum(s.reward for s in t) for t in trajectories])),
                           "erasures": sum(len(ep.erasure_events) for ep in episodes), **diag})
            if it % cfg.eval_every == 0 or it == cfg.iterations:
                curve.append({
                    "checkpoint": len(curve), "iteration": it,
                    "mean_reward": float(np.mean([w["mean_reward"] for w in window])),
                    "clip_fraction": float(np.mean([w["clip_fraction"] for w in window])),
                    "kl": window[-1]["kl"],
                    "mean_ratio": float(np.mean([w["mean_ratio"] for w in window])),
                    "erasures": int(sum(w["erasures"] for w in window)),
                    **self.evaluate(len(curve)),
                })
                log.info("%s seed %d iter %d: EM %.3f", cfg.algo, cfg.seed, it, curve[-1]["em"])
                window = []
        return TrainResult(cfg.algo, cfg.seed, curve, self.policy)


def train(world, config: TrainConfig) -> TrainResult:
    """Train on ``world = (SyntheticWorld, corpus, dataset)`` as returned by ``make_world``."""
    w, corpus, dataset = world
    return Trainer(corpus, dataset, config, w.relations, w.hop_depth).run()


@dataclass
class Comparison:
    seeds: list[int]
    sparse_em: list[float]
    erl_em: list[float]

    @property
    def erl_never_worse(self) -> bool:
        return all(e >= s for e, s in zip(self.erl_em, self.sparse_em))

    @property
    def erl_better_on_mean(self) -> bool:
        return float(np.mean(self.erl_em)) > float(np.mean(self.sparse_em))

    def table(self) -> str:
        lines = ["seed  ppo_sparse_EM  erl_EM"]
        for s, a, b in zip(self.seeds, self.sparse_em, self.erl_em):
            lines.append(f"{s:>4}  {a:>13.3f}  {b:>6.3f}")
        lines.append(f"mean  {np.mean(self.sparse_em):>13.3f}  {np.mean(self.erl_em):>6.3f}")
        return "\n".join(lines)

    def to_record(self) -> dict:
        return asdict(self)


def compare(seeds: Sequence[int] = (1, 2, 3, 4, 5), hop_depth: int = 2, n_entities: int = 24,
            base: Optional[TrainConfig] = None) -> Comparison:
    """Train both algorithms on the world built from each seed and report final sampled EM."""
    base = base or TrainConfig()
    sparse, erl = [], []
    for seed in seeds:
        world = make_world(seed, hop_depth, n_entities)
        sparse.append(train(world, replace(base, algo="ppo_sparse", seed=seed)).final_em)
        erl.append(train(world, replace(base, algo="erl", seed=seed)).final_em)
    return Comparison(list(seeds), sparse, erl)


def save_result(result: TrainResult, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curve_path = out / f"curve_{result.algo}_seed{result.seed}.jsonl"
    policy_path = out / f"policy_{result.algo}_seed{result.seed}.json"
    curve_path.write_text(result.curve_jsonl(), encoding="utf-8")
    policy_path.write_text(json.dumps(result.policy.to_record(), sort_keys=True) + "\n", encoding="utf-8")
    return curve_path, policy_path
