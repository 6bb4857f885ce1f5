"""The self-play loop: batch filling, reward coupling, buffer lifecycles,
starvation handling, checkpoint/resume.

Scripted-backend arenas make each step's dataflow fully deterministic:
the proposer and solver scripts are consumed in phase order (proposals,
then verifications, then solver groups), so every reward and return in
the step is known in advance. Toy-game arenas cover the in-process
update path end to end.
"""

from __future__ import annotations

import json

import numpy as np
import pytest

from ssp.adjudicator import EmJudge
from ssp.arena import (
    Arena,
    ArenaConfig,
    BatchStrategy,
    DUMMY_QUESTION,
    DUMMY_SLOT,
    DUMMY_TRUTH,
    METRICS_CSV_HEADER,
    ProblemSlot,
    ReplayBuffer,
    StepStarved,
    fill_batch,
    training_record,
)
from ssp.backends import ScriptedBackend
from ssp.dialogue import Role
from ssp.factchain import build_game, game_arena_config
from ssp.gatekeeper import FilterReason
from ssp.retriever import Document, index_documents
from ssp.rollout import RolloutLimits, run_episode

DOCS = [
    Document("d1", "tower guide", "The iron lattice tower rises above Paris ."),
    Document("d2", "river guide", "The Seine river flows through the old capital ."),
]
QUESTION = "Which European capital city hosts the famous iron lattice tower?"
GOOD_PROPOSAL = [
    "<think>work back from the truth</think><search>iron lattice tower</search>",
    f"<think>ready</think><question>{QUESTION}</question>",
]
BAD_PROPOSAL = [f"<question>{QUESTION}</question>"]  # never searched
RAG_OK = "The materials say it plainly. Answer: Paris"
ANSWER_RIGHT = "<think>recall</think><answer>Paris</answer>"
ANSWER_WRONG = "<think>guess</think><answer>Lyon</answer>"
ANSWER_DUMMY = "<think>read the question</think><answer>blue</answer>"


def scripted_arena(proposer_script, solver_script, **overrides) -> Arena:
    cfg = ArenaConfig(
        batch_size=1,
        group_size=2,
        steps=1,
        noise_docs=0,
        proposer_limits=RolloutLimits(max_search_calls=3),
        solver_limits=RolloutLimits(max_search_calls=3),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return Arena(
        ScriptedBackend(proposer_script),
        ScriptedBackend(solver_script),
        index_documents(DOCS),
        ["Paris"],
        EmJudge(),
        cfg,
    )


def toy_arena(seed: int = 0, steps: int = 10, **overrides):
    game = build_game()
    cfg = game_arena_config(game, seed=seed, steps=steps)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    arena = Arena(
        game.proposer_backend,
        game.solver_backend,
        game.index,
        game.answer_pool,
        EmJudge(),
        cfg,
    )
    return arena, game


# ------------------------------------------------------------ replay buffer


def slot(i: int) -> ProblemSlot:
    return ProblemSlot(truth=f"t{i}", question=f"question {i}", materials=(), origin="fresh")


def test_buffer_push_rewrites_origin_and_draw_replaces():
    buf = ReplayBuffer()
    buf.push(slot(0))
    assert buf.size == 1
    assert buf.entries[0].origin == "buffer"
    rng = np.random.default_rng(0)
    drawn = buf.draw(rng, 3)  # with replacement: more draws than entries
    assert len(drawn) == 3
    assert all(d.question == "question 0" for d in drawn)
    with pytest.raises(ValueError):
        ReplayBuffer().draw(rng, 1)


def test_buffer_capacity_evicts_oldest():
    buf = ReplayBuffer(capacity=3)
    for i in range(5):
        buf.push(slot(i))
    assert buf.size == 3
    assert [e.question for e in buf.entries] == ["question 2", "question 3", "question 4"]


def test_buffer_reset_periodicity():
    buf = ReplayBuffer(reset_period=10)
    buf.push(slot(0))
    for step in (1, 5, 9, 11, 19):
        buf.maybe_reset(step)
        assert buf.size == 1, f"cleared at non-multiple step {step}"
    buf.maybe_reset(20)
    assert buf.size == 0
    buf.push(slot(1))
    buf.maybe_reset(20)  # idempotent within the same step
    assert buf.size == 1
    never = ReplayBuffer(reset_period=None)
    never.push(slot(0))
    never.maybe_reset(100)
    assert never.size == 1


# --------------------------------------------------------------- fill_batch


def make_rng():
    return np.random.default_rng(7)


def test_fill_full_batch_passes_through():
    valid = [slot(0), slot(1)]
    fill = fill_batch(valid, 2, BatchStrategy.DUMMY_PADDING, ReplayBuffer(), 1, make_rng())
    assert fill.slots == tuple(valid)
    assert fill.dummy_count == 0 and not fill.wants_resample


def test_fill_dummy_padding():
    fill = fill_batch([slot(0)], 3, BatchStrategy.DUMMY_PADDING, ReplayBuffer(), 1, make_rng())
    assert len(fill.slots) == 3
    assert fill.slots[1] is DUMMY_SLOT and fill.slots[2] is DUMMY_SLOT
    assert fill.dummy_count == 2
    assert DUMMY_SLOT.question == DUMMY_QUESTION and DUMMY_SLOT.truth == DUMMY_TRUTH


def test_fill_dynamic_resampling_signals_then_pads():
    first = fill_batch([], 2, BatchStrategy.DYNAMIC_RESAMPLING, ReplayBuffer(), 1, make_rng())
    assert first.wants_resample and first.slots == ()
    last = fill_batch(
        [], 2, BatchStrategy.DYNAMIC_RESAMPLING, ReplayBuffer(), 1, make_rng(), allow_resample=False
    )
    assert not last.wants_resample
    assert last.dummy_count == 2


def test_fill_buffer_draws_before_pushing():
    buf = ReplayBuffer()
    fresh = [slot(0)]
    fill = fill_batch(fresh, 2, BatchStrategy.FULL_REUSE, buf, 1, make_rng())
    # nothing was in the buffer, so the shortfall is dummy-padded — this
    # step's own admission must not fill its own batch
    assert fill.dummy_fallback and fill.dummy_count == 1
    assert buf.size == 1  # pushed afterwards
    again = fill_batch([], 2, BatchStrategy.FULL_REUSE, buf, 2, make_rng())
    assert again.reused_count == 2
    assert all(s.origin == "buffer" for s in again.slots)
    assert not again.dummy_fallback


def test_fill_periodic_reset_clears_inside_fill():
    buf = ReplayBuffer(reset_period=5)
    buf.push(slot(0))
    fill = fill_batch([], 1, BatchStrategy.PERIODIC_RESET, buf, 5, make_rng())
    assert fill.dummy_fallback  # the reset emptied the pool first
    assert buf.size == 0


def test_fill_rejects_overfull_valid_set():
    with pytest.raises(ValueError):
        fill_batch([slot(0), slot(1)], 1, BatchStrategy.DUMMY_PADDING, ReplayBuffer(), 1, make_rng())


# --------------------------------------------------------- scripted stepping


def test_clean_step_couples_rewards():
    arena = scripted_arena(
        list(GOOD_PROPOSAL), [RAG_OK, ANSWER_RIGHT, ANSWER_WRONG]
    )
    metrics, batch = arena.step()
    assert metrics.valid_question_rate == 1.0
    assert metrics.mean_solver_reward == 0.5
    assert metrics.mean_proposer_reward == 0.5
    assert batch.slots[0].origin == "fresh"
    assert batch.slots[0].question == QUESTION
    assert batch.proposals[0].verdict.accepted
    record = batch.records[0]
    assert record.group_rewards == (1.0, 0.0)
    assert record.proposer_reward + float(np.mean(record.group_rewards)) == 1.0
    assert record.verification.judged_correct
    assert record.verification.materials == (DOCS[0],)  # own evidence, no noise
    assert arena.proposer_backend.remaining == 0
    assert arena.solver_backend.remaining == 0


def test_rejected_proposal_pads_with_dummy():
    arena = scripted_arena(list(BAD_PROPOSAL), [ANSWER_DUMMY, ANSWER_DUMMY])
    metrics, batch = arena.step()
    assert metrics.valid_question_rate == 0.0
    assert batch.proposals[0].verdict.reason is FilterReason.NO_SEARCH_INVOKED
    assert batch.slots[0].origin == "dummy"
    assert batch.group_rewards == ((1.0, 1.0),)  # dummy is trivially solvable
    assert batch.proposer_returns == (0.0,)
    assert batch.records == ()


def test_negative_format_fail_reward_flag():
    arena = scripted_arena(
        list(BAD_PROPOSAL), ["no tags at all", ANSWER_DUMMY], format_fail_reward=-0.1
    )
    _, batch = arena.step()
    assert batch.proposer_returns == (-0.1,)
    assert batch.group_rewards == ((-0.1, 1.0),)  # malformed solver turn


def test_rag_rejection_blocks_admission():
    arena = scripted_arena(
        list(GOOD_PROPOSAL),
        ["Answer: Lyon", ANSWER_DUMMY, ANSWER_DUMMY],  # verification fails
    )
    metrics, batch = arena.step()
    assert batch.proposals[0].verdict.reason is FilterReason.RAG_REJECTED
    assert batch.proposals[0].verification.judged_correct is False
    assert metrics.valid_question_rate == 0.0
    assert batch.slots[0].origin == "dummy"
    assert batch.records == ()


def test_infrastructure_failure_is_isolated_and_penalized():
    # the solver script runs dry after the verification and one rollout
    arena = scripted_arena(list(GOOD_PROPOSAL), [RAG_OK, ANSWER_RIGHT])
    _, batch = arena.step()
    group = batch.solver_groups[0]
    assert len(group) == 2
    failures = [g for g in group if not hasattr(g, "terminal")]
    assert len(failures) == 1  # EpisodeError, not a crash
    assert batch.group_rewards[0] == (1.0, 0.0)
    assert batch.records[0].solver_group == tuple(
        g for g in group if hasattr(g, "terminal")
    )


def test_dynamic_resampling_retries_until_a_valid_question():
    script = list(BAD_PROPOSAL) * 3 + list(GOOD_PROPOSAL)
    arena = scripted_arena(
        script,
        [RAG_OK, ANSWER_RIGHT, ANSWER_RIGHT],
        strategy=BatchStrategy.DYNAMIC_RESAMPLING,
    )
    metrics, batch = arena.step()
    assert len(batch.proposals) == 4  # three rejected rounds, then success
    assert metrics.valid_question_rate == 0.25
    assert batch.slots[0].origin == "fresh"
    assert len(batch.records) == 1


def test_dynamic_resampling_gives_up_after_round_cap():
    arena = scripted_arena(
        list(BAD_PROPOSAL) * 5,
        [ANSWER_DUMMY, ANSWER_DUMMY],
        strategy=BatchStrategy.DYNAMIC_RESAMPLING,
    )
    metrics, batch = arena.step()
    assert len(batch.proposals) == 5
    assert batch.slots[0].origin == "dummy"
    assert metrics.valid_question_rate == 0.0


def test_full_reuse_refills_from_previous_steps():
    arena = scripted_arena(
        GOOD_PROPOSAL + BAD_PROPOSAL,
        [RAG_OK, ANSWER_RIGHT, ANSWER_WRONG, ANSWER_RIGHT, ANSWER_RIGHT],
        strategy=BatchStrategy.FULL_REUSE,
    )
    first_metrics, first = arena.step()
    assert first.slots[0].origin == "fresh"
    assert first_metrics.buffer_size == 1
    second_metrics, second = arena.step()
    assert second.slots[0].origin == "buffer"
    assert second.slots[0].question == QUESTION  # the step-1 admission
    assert second.records == ()  # reused slots train the solver only
    assert second.group_rewards == ((1.0, 1.0),)
    assert second_metrics.buffer_size == 1


def test_starved_step_raises_when_dummies_disallowed():
    arena = scripted_arena(list(BAD_PROPOSAL), [], allow_dummy=False)
    with pytest.raises(StepStarved) as err:
        arena.step()
    assert err.value.diagnostics["reasons"] == {"NoSearchInvoked": 1}
    assert err.value.diagnostics["step"] == 1


def test_run_tolerates_then_raises_on_starvation_streak():
    arena = scripted_arena(
        BAD_PROPOSAL + GOOD_PROPOSAL,
        [RAG_OK, ANSWER_RIGHT, ANSWER_RIGHT],
        allow_dummy=False,
        starved_tolerance=5,
        steps=2,
    )
    history = arena.run()
    assert len(history) == 1  # the starved step was skipped, not recorded
    assert history[0].step == 2

    strict = scripted_arena(
        list(BAD_PROPOSAL) * 3, [], allow_dummy=False, starved_tolerance=2, steps=3
    )
    with pytest.raises(StepStarved):
        strict.run()


def test_arena_requires_answers():
    with pytest.raises(ValueError, match="answer pool"):
        Arena(
            ScriptedBackend([]),
            ScriptedBackend([]),
            index_documents(DOCS),
            [],
            EmJudge(),
            ArenaConfig(),
        )


# ----------------------------------------------------------- training record


def test_training_record_masks_exactly_the_observations():
    backend = ScriptedBackend(
        [
            "<think>need a fact</think><search>iron lattice tower</search>",
            "<think>done</think><answer>Paris</answer>",
        ]
    )
    traj = run_episode(
        Role.SOLVER_SEARCH,
        "Which city hosts the tower?",
        backend,
        index=index_documents(DOCS),
        limits=RolloutLimits(),
        seed=0,
    )
    rec = training_record("solver", traj, 0.25, step=7)
    assert rec["step"] == 7 and rec["role"] == "solver" and rec["credit"] == 0.25
    assert rec["text"].startswith("<think>need a fact</think><search>iron lattice tower</search>")
    assert rec["text"].endswith("<think>done</think><answer>Paris</answer>")
    assert len(rec["mask_spans"]) == 1
    lo, hi = rec["mask_spans"][0]
    masked = rec["text"][lo:hi]
    assert masked.startswith("<information>\n") and masked.endswith("\n</information>")
    assert "iron lattice tower rises above Paris" in masked
    unmasked = rec["text"][:lo] + rec["text"][hi:]
    assert "<information>" not in unmasked


def test_records_path_appends_one_line_per_trajectory(tmp_path):
    records_file = tmp_path / "records.jsonl"
    arena = scripted_arena(
        list(GOOD_PROPOSAL),
        [RAG_OK, ANSWER_RIGHT, ANSWER_WRONG],
        records_path=str(records_file),
    )
    arena.step()
    lines = [json.loads(l) for l in records_file.read_text().splitlines()]
    solver_lines = [l for l in lines if l["role"] == "solver"]
    proposer_lines = [l for l in lines if l["role"] == "proposer"]
    assert len(solver_lines) == 2 and len(proposer_lines) == 1
    assert sorted(l["credit"] for l in solver_lines) == [-0.5, 0.5]  # group advantages
    assert proposer_lines[0]["credit"] == 0.5
    assert all(l["step"] == 1 for l in lines)


# ------------------------------------------------------------- the toy loop


def test_toy_run_emits_metrics_csv(tmp_path):
    metrics_file = tmp_path / "metrics.csv"
    arena, _ = toy_arena(seed=0, steps=3, metrics_path=str(metrics_file))
    history = arena.run()
    assert len(history) == 3
    lines = metrics_file.read_text().splitlines()
    assert lines[0] == METRICS_CSV_HEADER
    assert lines[1:] == [m.csv_row() for m in history]
    assert [m.step for m in history] == [1, 2, 3]


def test_output_paths_create_missing_parent_dirs(tmp_path):
    # metrics/records may point inside out_dir before it exists
    run_dir = tmp_path / "run0"
    arena, _ = toy_arena(
        seed=0,
        steps=1,
        metrics_path=str(run_dir / "metrics.csv"),
        records_path=str(run_dir / "records.jsonl"),
    )
    arena.run()
    assert (run_dir / "metrics.csv").exists()
    assert (run_dir / "records.jsonl").exists()


def test_toy_run_couples_rewards_on_every_record():
    arena, _ = toy_arena(seed=1, steps=4)
    for _ in range(4):
        _, batch = arena.step()
        assert len(batch.slots) == arena.cfg.batch_size
        for record in batch.records:
            assert record.proposer_reward + float(np.mean(record.group_rewards)) == 1.0


def test_toy_updates_move_both_policies():
    arena, game = toy_arena(seed=2, steps=2)
    solver_before = arena.solver_backend.policy.logits.copy()
    proposer_before = arena.proposer_backend.policy.logits.copy()
    arena.step()
    assert not np.array_equal(arena.solver_backend.policy.logits, solver_before)
    assert not np.array_equal(arena.proposer_backend.policy.logits, proposer_before)
    # the reference stays pinned at the warm start
    assert np.array_equal(arena.solver_reference.logits, solver_before)


def test_proposer_warmup_freezes_updates():
    arena, _ = toy_arena(seed=3, steps=4, proposer_warmup_steps=2)
    before = arena.proposer_backend.policy.logits.copy()
    arena.step()
    arena.step()
    assert np.array_equal(arena.proposer_backend.policy.logits, before)
    arena.step()
    assert not np.array_equal(arena.proposer_backend.policy.logits, before)


def test_periodic_reset_clears_buffer_on_schedule():
    arena, _ = toy_arena(
        seed=4, steps=7, strategy=BatchStrategy.PERIODIC_RESET, reset_period=3
    )
    starts: dict[int, int] = {}
    sizes: dict[int, int] = {}
    for _ in range(7):
        metrics, _ = arena.step()
        starts[metrics.step] = arena.buffer_size_at_step_start
        sizes[metrics.step] = metrics.buffer_size
    assert starts[3] == 0 and starts[6] == 0  # cleared at each period boundary
    assert starts[2] > 0 and starts[4] > 0 and starts[5] > 0 and starts[7] > 0
    assert all(size > 0 for size in sizes.values())  # refills within the step


def test_full_reuse_buffer_never_shrinks():
    arena, _ = toy_arena(seed=5, steps=6, strategy=BatchStrategy.FULL_REUSE)
    sizes = [arena.step()[0].buffer_size for _ in range(6)]
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))
    assert sizes[-1] > 0


def test_checkpoint_resume_is_bit_identical(tmp_path):
    full, _ = toy_arena(seed=6, steps=6)
    full_history = full.run()

    first_half, _ = toy_arena(seed=6, steps=6)
    first_half.run(3)
    first_half.save_checkpoint(tmp_path)

    resumed, _ = toy_arena(seed=6, steps=6)
    resumed.load_checkpoint(tmp_path)
    assert resumed.step_index == 3
    second_half = resumed.run(3)

    assert second_half == full_history[3:]
    assert np.array_equal(
        resumed.solver_backend.policy.logits, full.solver_backend.policy.logits
    )
    assert np.array_equal(
        resumed.proposer_backend.policy.logits, full.proposer_backend.policy.logits
    )


def test_checkpoint_rejects_seed_mismatch(tmp_path):
    arena, _ = toy_arena(seed=7, steps=1)
    arena.step()
    arena.save_checkpoint(tmp_path)
    other, _ = toy_arena(seed=8, steps=1)
    with pytest.raises(ValueError, match="seed"):
        other.load_checkpoint(tmp_path)


def test_checkpoint_files(tmp_path):
    arena, _ = toy_arena(seed=9, steps=1)
    arena.step()
    arena.save_checkpoint(tmp_path)
    assert (tmp_path / "solver.txt").exists()
    assert (tmp_path / "proposer.txt").exists()
    state = json.loads((tmp_path / "state.json").read_text())
    assert state == {"seed": 9, "step": 1}
