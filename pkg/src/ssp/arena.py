"""Self-play training loop: propose, filter, verify, solve, reward, update.

One step runs in phase barriers — all proposals finish before filtering,
all verifications before solving, all solving before any update — so a
step is a pure function of (seed, step index, policies). Under-full
batches are completed by a configurable strategy: dummy padding, bounded
dynamic resampling, or a replay buffer of previously admitted questions
(with or without periodic clearing).

With toy backends the arena applies parameter updates in-process:
grouped advantage updates for the solver, plain REINFORCE for the
proposer (its return is one minus the group's mean solver reward, so
proposer and solver rewards for one record always sum to one). With a
remote backend, updates cannot happen in-process; the arena instead
emits one training record per trajectory (text, mask spans, scalar
credit) for an external trainer.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .adjudicator import Judge
from .backends import ToyBackend, derive_seed
from .credit import (
    LengthNorm,
    OptimConfig,
    TokenChain,
    apply_update,
    concat_chains,
    grpo_advantages,
    grpo_loss_grad,
    proposer_reward,
    reinforce_grad,
    solver_rewards,
)
from .dialogue import (
    Role,
    SegmentKind,
    Terminal,
    Trajectory,
    collect_observations,
    extract_answer,
    extract_question,
    flatten_segments,
)
from .gatekeeper import (
    FilterReason,
    FilterVerdict,
    VerificationRecord,
    assemble_materials,
    rag_verify,
    rule_filter,
)
from .retriever import BM25Index, Document
from .rollout import RolloutLimits, run_episode, run_group

DUMMY_QUESTION = "State the color named in this question: blue."
DUMMY_TRUTH = "blue"
RESAMPLE_ROUND_CAP = 5
DEFAULT_RESET_PERIOD = 10

METRICS_CSV_HEADER = (
    "step,valid_question_rate,mean_solver_reward,mean_proposer_reward,"
    "mean_search_calls,mean_response_chars,buffer_size"
)


class BatchStrategy(str, Enum):
    DUMMY_PADDING = "dummy_padding"
    DYNAMIC_RESAMPLING = "dynamic_resampling"
    FULL_REUSE = "full_reuse"
    PERIODIC_RESET = "periodic_reset"


_BUFFER_STRATEGIES = (BatchStrategy.FULL_REUSE, BatchStrategy.PERIODIC_RESET)


class StepStarved(RuntimeError):
    """A step produced no usable problem and dummy padding was disallowed."""

    def __init__(self, message: str, diagnostics: dict) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class ProblemSlot:
    """One problem the solver group will attempt this step."""

    truth: str
    question: str
    materials: tuple[Document, ...]
    origin: str  # "fresh" | "buffer" | "dummy"


DUMMY_SLOT = ProblemSlot(
    truth=DUMMY_TRUTH, question=DUMMY_QUESTION, materials=(), origin="dummy"
)


@dataclass
class ReplayBuffer:
    """Pool of previously admitted (truth, question, materials) problems."""

    capacity: int | None = None
    reset_period: int | None = None
    entries: list[ProblemSlot] = field(default_factory=list)
    last_reset_step: int | None = None

    @property
    def size(self) -> int:
        return len(self.entries)

    def push(self, slot: ProblemSlot) -> None:
        self.entries.append(replace(slot, origin="buffer"))
        if self.capacity is not None and len(self.entries) > self.capacity:
            del self.entries[0]

    def draw(self, rng: np.random.Generator, count: int) -> list[ProblemSlot]:
        """Uniform draws with replacement (the pool may be smaller than count)."""
        if not self.entries:
            raise ValueError("cannot draw from an empty buffer")
        return [self.entries[int(rng.integers(len(self.entries)))] for _ in range(count)]

    def clear(self) -> None:
        self.entries.clear()

    def maybe_reset(self, step_index: int) -> None:
        """Clear at the start of every step whose 1-based index is a multiple
        of ``reset_period``; idempotent within a step."""
        if (
            self.reset_period
            and step_index > 0
            and step_index % self.reset_period == 0
            and self.last_reset_step != step_index
        ):
            self.clear()
            self.last_reset_step = step_index


@dataclass(frozen=True)
class FillResult:
    slots: tuple[ProblemSlot, ...]
    wants_resample: bool
    dummy_count: int
    reused_count: int
    dummy_fallback: bool  # buffer strategy degraded to dummy padding


def fill_batch(
    valid: Sequence[ProblemSlot],
    batch_size: int,
    strategy: BatchStrategy,
    buffer: ReplayBuffer,
    step_index: int,
    rng: np.random.Generator,
    allow_resample: bool = True,
) -> FillResult:
    """Complete a batch of exactly ``batch_size`` problem slots.

    Dynamic resampling signals the caller to regenerate while rounds
    remain instead of padding. Buffer strategies draw uniformly from the
    buffer, then push this step's admitted problems (draw before push, so
    a problem never fills the step that admitted it); an empty buffer
    falls back to dummy padding for the shortfall.
    """
    if len(valid) > batch_size:
        raise ValueError("more valid problems than batch slots")
    slots = list(valid)
    missing = batch_size - len(slots)

    if strategy is BatchStrategy.DYNAMIC_RESAMPLING and missing and allow_resample:
        return FillResult(tuple(slots), True, 0, 0, False)

    dummy_count = 0
    reused_count = 0
    dummy_fallback = False
    if strategy in _BUFFER_STRATEGIES:
        buffer.maybe_reset(step_index)
        if missing:
            if buffer.size:
                slots.extend(buffer.draw(rng, missing))
                reused_count = missing
            else:
                slots.extend([DUMMY_SLOT] * missing)
                dummy_count = missing
                dummy_fallback = True
        for slot in valid:
            buffer.push(slot)
    elif missing:
        slots.extend([DUMMY_SLOT] * missing)
        dummy_count = missing

    return FillResult(tuple(slots), False, dummy_count, reused_count, dummy_fallback)


@dataclass(frozen=True)
class ProposalOutcome:
    """One proposer episode and its admission outcome."""

    truth: str
    trajectory: Trajectory
    question: str
    verdict: FilterVerdict
    verification: VerificationRecord | None


@dataclass(frozen=True)
class EpisodeRecord:
    """One admitted question with its solved group; rewards are coupled:
    ``proposer_reward + mean(group_rewards) == 1`` exactly."""

    truth: str
    proposer_traj: Trajectory
    question: str
    verification: VerificationRecord
    solver_group: tuple[Trajectory, ...]
    group_rewards: tuple[float, ...]
    proposer_reward: float


@dataclass(frozen=True)
class TrainBatch:
    proposals: tuple[ProposalOutcome, ...]
    slots: tuple[ProblemSlot, ...]
    solver_groups: tuple[tuple[object, ...], ...]  # Trajectory | EpisodeError
    group_rewards: tuple[tuple[float, ...], ...]
    proposer_returns: tuple[float, ...]  # aligned with proposals
    records: tuple[EpisodeRecord, ...]


@dataclass(frozen=True)
class StepMetrics:
    step: int
    valid_question_rate: float
    mean_solver_reward: float
    mean_proposer_reward: float
    mean_search_calls: float
    mean_response_chars: float
    buffer_size: int

    def csv_row(self) -> str:
        return (
            f"{self.step},{self.valid_question_rate:.6f},{self.mean_solver_reward:.6f},"
            f"{self.mean_proposer_reward:.6f},{self.mean_search_calls:.6f},"
            f"{self.mean_response_chars:.6f},{self.buffer_size}"
        )


@dataclass
class ArenaConfig:
    batch_size: int = 8
    group_size: int = 5
    steps: int = 10
    seed: int = 0
    strategy: BatchStrategy = BatchStrategy.DUMMY_PADDING
    reset_period: int = DEFAULT_RESET_PERIOD
    buffer_capacity: int | None = None
    noise_docs: int = 4
    rag_samples: int = 1
    question_searches: int = 3
    top_k: int = 3
    rollout_temperature: float = 1.0
    beta: float = 0.01
    learning_rate: float = 0.01
    proposer_learning_rate: float | None = None  # defaults to learning_rate
    length_norm: LengthNorm = LengthNorm.UNMASKED_COUNT
    format_fail_reward: float = 0.0
    proposer_warmup_steps: int = -1  # positive: freeze proposer updates that long
    allow_dummy: bool = True
    starved_tolerance: int = 3
    workers: int = 1
    proposer_limits: RolloutLimits = field(default_factory=RolloutLimits)
    solver_limits: RolloutLimits = field(default_factory=RolloutLimits)
    checkpoint_every: int = 0  # 0 disables checkpoints
    out_dir: str | None = None
    metrics_path: str | None = None
    records_path: str | None = None

    def optim(self) -> OptimConfig:
        return OptimConfig(
            beta=self.beta,
            learning_rate=self.learning_rate,
            length_norm=self.length_norm,
            format_fail_reward=self.format_fail_reward,
        )


def _episode_chain(traj: Trajectory) -> TokenChain:
    return concat_chains(
        [t.chain for t in traj.turns if isinstance(t.chain, TokenChain)]
    )


def training_record(role: str, traj: Trajectory, credit: float, step: int) -> dict:
    """Serializable credit-assignment record for an external trainer.

    ``text`` is the rendered trajectory (prompt excluded); ``mask_spans``
    are the character ranges of environment-injected content that must
    not receive loss.
    """
    parts: list[str] = []
    mask_spans: list[list[int]] = []
    pos = 0
    for seg in flatten_segments(traj):
        if seg.kind is SegmentKind.INFORMATION:
            rendered = f"<information>\n{seg.text}\n</information>"
        elif seg.kind is SegmentKind.PLAIN:
            rendered = seg.text
        else:
            rendered = f"<{seg.kind.value}>{seg.text}</{seg.kind.value}>"
        end = pos + len(rendered)
        if seg.kind is SegmentKind.INFORMATION:
            mask_spans.append([pos, end])
        parts.append(rendered)
        pos = end
    return {
        "step": step,
        "role": role,
        "credit": credit,
        "text": "".join(parts),
        "mask_spans": mask_spans,
    }


class Arena:
    """Coordinator owning the loop state: policies, buffer, step counter.

    Each step seeds every stochastic choice from ``(seed, step_index)``,
    so training is reproducible and resumable: restoring the policies and
    the step counter reproduces the remaining steps bit-for-bit.
    """

    def __init__(
        self,
        proposer_backend,
        solver_backend,
        index: BM25Index,
        answer_pool: Sequence[str],
        judge: Judge,
        cfg: ArenaConfig,
        corpus: Sequence[Document] | None = None,
    ) -> None:
        if not answer_pool:
            raise ValueError("answer pool must be non-empty")
        self.proposer_backend = proposer_backend
        self.solver_backend = solver_backend
        self.index = index
        self.answer_pool = list(answer_pool)
        self.judge = judge
        self.cfg = cfg
        self.corpus = list(corpus) if corpus is not None else list(index.documents)
        self.buffer = ReplayBuffer(
            capacity=cfg.buffer_capacity,
            reset_period=cfg.reset_period if cfg.strategy is BatchStrategy.PERIODIC_RESET else None,
        )
        self.step_index = 0
        self.buffer_size_at_step_start = 0
        self.dummy_fallback_steps = 0
        self.solver_reference = (
            solver_backend.policy.snapshot() if isinstance(solver_backend, ToyBackend) else None
        )

    # ---------------------------------------------------------------- phases

    def _propose(self, step_seed: int, round_index: int, count: int) -> list[tuple[str, Trajectory]]:
        rng = np.random.default_rng(derive_seed(step_seed, 10, round_index))
        truths = [
            self.answer_pool[int(rng.integers(len(self.answer_pool)))] for _ in range(count)
        ]

        def one(i: int) -> Trajectory:
            return run_episode(
                Role.PROPOSER,
                truths[i],
                self.proposer_backend,
                self.index,
                limits=self.cfg.proposer_limits,
                seed=derive_seed(step_seed, 20, round_index, i),
                temperature=self.cfg.rollout_temperature,
                top_k=self.cfg.top_k,
                question_searches=self.cfg.question_searches,
            )

        if self.cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                trajs = list(pool.map(one, range(count)))
        else:
            trajs = [one(i) for i in range(count)]
        return list(zip(truths, trajs))

    def _gate(
        self, step_seed: int, round_index: int, proposed: list[tuple[str, Trajectory]]
    ) -> list[ProposalOutcome]:
        batch_obs = [collect_observations(traj) for _, traj in proposed]
        outcomes: list[ProposalOutcome] = []
        for i, (truth, traj) in enumerate(proposed):
            question = ""
            if traj.terminal is Terminal.COMPLETED:
                question = extract_question(traj)
            verdict = rule_filter(question, traj, truth)
            verification = None
            if verdict.accepted:
                materials, noise_ids = assemble_materials(
                    batch_obs,
                    i,
                    m=self.cfg.noise_docs,
                    seed=derive_seed(step_seed, 30, round_index),
                    corpus=self.corpus,
                )
                verification = rag_verify(
                    question,
                    truth,
                    materials,
                    self.solver_backend,
                    self.judge,
                    noise_doc_ids=noise_ids,
                    samples=self.cfg.rag_samples,
                    limits=self.cfg.solver_limits,
                    seed=derive_seed(step_seed, 40, round_index, i),
                )
                if not verification.judged_correct:
                    verdict = FilterVerdict(False, FilterReason.RAG_REJECTED)
            outcomes.append(ProposalOutcome(truth, traj, question, verdict, verification))
        return outcomes

    def _solve_slot(self, step_seed: int, slot_index: int, slot: ProblemSlot):
        return run_group(
            Role.SOLVER_SEARCH,
            slot.question,
            self.solver_backend,
            self.index,
            n=self.cfg.group_size,
            limits=self.cfg.solver_limits,
            seed=derive_seed(step_seed, 50, slot_index),
            temperature=self.cfg.rollout_temperature,
            top_k=self.cfg.top_k,
            workers=self.cfg.workers,
        )

    def _reward_group(self, slot: ProblemSlot, group: Sequence[object]) -> list[float]:
        optim = self.cfg.optim()
        trajs = [g for g in group if isinstance(g, Trajectory)]
        judged = []
        for traj in trajs:
            ok = False
            if traj.terminal is Terminal.COMPLETED:
                ok = self.judge.judge(slot.question, extract_answer(traj), slot.truth).correct
            judged.append(ok)
        traj_rewards = iter(solver_rewards(trajs, judged, optim))
        # Infrastructure failures earn the format-failure reward as well;
        # they carry no chain, so they never reach the update.
        return [
            float(next(traj_rewards)) if isinstance(g, Trajectory) else optim.format_fail_reward
            for g in group
        ]

    # ------------------------------------------------------------------ step

    def step(self) -> tuple[StepMetrics, TrainBatch]:
        cfg = self.cfg
        self.step_index += 1
        s = self.step_index
        step_seed = derive_seed(cfg.seed, s)
        self.buffer.maybe_reset(s)
        self.buffer_size_at_step_start = self.buffer.size
        fill_rng = np.random.default_rng(derive_seed(step_seed, 60))

        proposals: list[ProposalOutcome] = []
        valid_slots: list[ProblemSlot] = []
        round_index = 0
        while True:
            round_index += 1
            count = cfg.batch_size - len(valid_slots)
            outcomes = self._gate(step_seed, round_index, self._propose(step_seed, round_index, count))
            proposals.extend(outcomes)
            for out in outcomes:
                if out.verdict.accepted:
                    valid_slots.append(
                        ProblemSlot(
                            truth=out.truth,
                            question=out.question,
                            materials=out.verification.materials,
                            origin="fresh",
                        )
                    )
            allow_resample = round_index < RESAMPLE_ROUND_CAP
            fill = fill_batch(
                valid_slots, cfg.batch_size, cfg.strategy, self.buffer, s, fill_rng, allow_resample
            )
            if not fill.wants_resample:
                break
        if fill.dummy_fallback:
            self.dummy_fallback_steps += 1

        slots = fill.slots
        if not cfg.allow_dummy and all(slot.origin == "dummy" for slot in slots):
            raise StepStarved(
                f"step {s}: no valid question survived filtering",
                {
                    "step": s,
                    "proposed": len(proposals),
                    "reasons": dict(Counter(p.verdict.reason.value for p in proposals)),
                },
            )

        solver_groups = tuple(
            tuple(self._solve_slot(step_seed, k, slot)) for k, slot in enumerate(slots)
        )
        group_rewards = tuple(
            tuple(self._reward_group(slot, group))
            for slot, group in zip(slots, solver_groups)
        )

        # Proposer returns: admitted proposals earn 1 - mean solver reward of
        # their group; rejected ones earn the format-failure reward.
        returns: list[float] = []
        fresh_slot_by_proposal: dict[int, int] = {}
        fresh_index = 0
        for p_idx, out in enumerate(proposals):
            if out.verdict.accepted:
                fresh_slot_by_proposal[p_idx] = fresh_index
                fresh_index += 1
        for p_idx, out in enumerate(proposals):
            if out.verdict.accepted:
                returns.append(proposer_reward(group_rewards[fresh_slot_by_proposal[p_idx]]))
            else:
                returns.append(cfg.format_fail_reward)

        records = tuple(
            EpisodeRecord(
                truth=out.truth,
                proposer_traj=out.trajectory,
                question=out.question,
                verification=out.verification,
                solver_group=tuple(
                    g for g in solver_groups[fresh_slot_by_proposal[p_idx]] if isinstance(g, Trajectory)
                ),
                group_rewards=group_rewards[fresh_slot_by_proposal[p_idx]],
                proposer_reward=returns[p_idx],
            )
            for p_idx, out in enumerate(proposals)
            if out.verdict.accepted
        )

        self._update(step_seed, proposals, returns, slots, solver_groups, group_rewards)

        solver_trajs = [
            g for group in solver_groups for g in group if isinstance(g, Trajectory)
        ]
        all_rewards = [r for group in group_rewards for r in group]
        metrics = StepMetrics(
            step=s,
            valid_question_rate=len(valid_slots) / len(proposals),
            mean_solver_reward=float(np.mean(all_rewards)) if all_rewards else 0.0,
            mean_proposer_reward=float(np.mean(returns)) if returns else 0.0,
            mean_search_calls=(
                float(np.mean([t.search_count for t in solver_trajs])) if solver_trajs else 0.0
            ),
            mean_response_chars=(
                float(np.mean([t.model_chars for t in solver_trajs])) if solver_trajs else 0.0
            ),
            buffer_size=self.buffer.size,
        )
        batch = TrainBatch(
            proposals=tuple(proposals),
            slots=slots,
            solver_groups=solver_groups,
            group_rewards=group_rewards,
            proposer_returns=tuple(returns),
            records=records,
        )
        return metrics, batch

    # --------------------------------------------------------------- updates

    def _update(
        self,
        step_seed: int,
        proposals: Sequence[ProposalOutcome],
        returns: Sequence[float],
        slots: Sequence[ProblemSlot],
        solver_groups: Sequence[Sequence[object]],
        group_rewards: Sequence[Sequence[float]],
    ) -> None:
        cfg = self.cfg
        optim = cfg.optim()

        if isinstance(self.solver_backend, ToyBackend):
            groups: list[list[TokenChain]] = []
            rewards: list[list[float]] = []
            for group, grp_rewards in zip(solver_groups, group_rewards):
                chains = []
                rs = []
                for item, r in zip(group, grp_rewards):
                    if isinstance(item, Trajectory):
                        chain = _episode_chain(item)
                        if len(chain):
                            chains.append(chain)
                            rs.append(float(r))
                if chains:
                    groups.append(chains)
                    rewards.append(rs)
            if groups:
                grad, _ = grpo_loss_grad(
                    self.solver_backend.policy, self.solver_reference, groups, rewards, optim
                )
                self.solver_backend.policy = apply_update(
                    self.solver_backend.policy, grad, cfg.learning_rate
                )

        frozen = cfg.proposer_warmup_steps > 0 and self.step_index <= cfg.proposer_warmup_steps
        if isinstance(self.proposer_backend, ToyBackend) and not frozen:
            chains = []
            rets = []
            for out, ret in zip(proposals, returns):
                chain = _episode_chain(out.trajectory)
                if len(chain):
                    chains.append(chain)
                    rets.append(float(ret))
            if chains:
                grad, _ = reinforce_grad(self.proposer_backend.policy, chains, rets)
                lr = (
                    cfg.proposer_learning_rate
                    if cfg.proposer_learning_rate is not None
                    else cfg.learning_rate
                )
                self.proposer_backend.policy = apply_update(
                    self.proposer_backend.policy, grad, lr
                )

        if cfg.records_path:
            self._append_records(proposals, returns, slots, solver_groups, group_rewards)

    def _append_records(
        self,
        proposals: Sequence[ProposalOutcome],
        returns: Sequence[float],
        slots: Sequence[ProblemSlot],
        solver_groups: Sequence[Sequence[object]],
        group_rewards: Sequence[Sequence[float]],
    ) -> None:
        lines: list[str] = []
        for group, grp_rewards in zip(solver_groups, group_rewards):
            trajs = [(g, r) for g, r in zip(group, grp_rewards) if isinstance(g, Trajectory)]
            if not trajs:
                continue
            advantages = grpo_advantages([r for _, r in trajs])
            for (traj, _), adv in zip(trajs, advantages):
                lines.append(
                    json.dumps(
                        training_record("solver", traj, float(adv), self.step_index),
                        ensure_ascii=False,
                    )
                )
        for out, ret in zip(proposals, returns):
            lines.append(
                json.dumps(
                    training_record("proposer", out.trajectory, float(ret), self.step_index),
                    ensure_ascii=False,
                )
            )
        _ensure_parent(self.cfg.records_path)
        with open(self.cfg.records_path, "a", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")

    # ------------------------------------------------------------------- run

    def run(self, steps: int | None = None) -> list[StepMetrics]:
        total = steps if steps is not None else self.cfg.steps
        history: list[StepMetrics] = []
        starved_streak = 0
        for _ in range(total):
            try:
                metrics, _ = self.step()
            except StepStarved:
                starved_streak += 1
                if starved_streak > self.cfg.starved_tolerance:
                    raise
                continue
            starved_streak = 0
            history.append(metrics)
            if self.cfg.metrics_path:
                _append_metrics(self.cfg.metrics_path, metrics)
            if (
                self.cfg.checkpoint_every
                and self.cfg.out_dir
                and self.step_index % self.cfg.checkpoint_every == 0
            ):
                self.save_checkpoint(self.cfg.out_dir)
        return history

    # ---------------------------------------------------------- checkpoints

    def save_checkpoint(self, out_dir: str | os.PathLike[str]) -> None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        if isinstance(self.solver_backend, ToyBackend):
            self.solver_backend.policy.save_table(path / "solver.txt")
        if isinstance(self.proposer_backend, ToyBackend):
            self.proposer_backend.policy.save_table(path / "proposer.txt")
        state = {"step": self.step_index, "seed": self.cfg.seed}
        (path / "state.json").write_text(json.dumps(state, sort_keys=True), encoding="utf-8")

    def load_checkpoint(self, out_dir: str | os.PathLike[str]) -> None:
        from .credit import ToyPolicy

        path = Path(out_dir)
        state = json.loads((path / "state.json").read_text(encoding="utf-8"))
        if state["seed"] != self.cfg.seed:
            raise ValueError(
                f"checkpoint seed {state['seed']} does not match config seed {self.cfg.seed}"
            )
        self.step_index = int(state["step"])
        if isinstance(self.solver_backend, ToyBackend):
            self.solver_backend.policy = ToyPolicy.load_table(
                path / "solver.txt", self.solver_backend.policy.vocab
            )
        if isinstance(self.proposer_backend, ToyBackend):
            self.proposer_backend.policy = ToyPolicy.load_table(
                path / "proposer.txt", self.proposer_backend.policy.vocab
            )


def _ensure_parent(path: str | os.PathLike[str]) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def _append_metrics(path: str | os.PathLike[str], metrics: StepMetrics) -> None:
    _ensure_parent(path)
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8") as fh:
        if new_file:
            fh.write(METRICS_CSV_HEADER + "\n")
        fh.write(metrics.csv_row() + "\n")
