from decimal import Decimal, getcontext

import numpy as np
import pytest

from cpnas.ops import ALL_OPS, OpKind
from cpnas.search import (
    AccuracyPair,
    IndicatorConfig,
    PlantedEvaluator,
    SearchError,
    SearchState,
    aggregate_scores,
    compute_indicator,
    eliminate_worst,
    load_search,
    record,
    run_search,
    sample_without_replacement,
    score_table_tsv,
    softmax_scores,
    total_search_epochs,
)
from cpnas.space import CELL_TYPES, NUM_EDGES


class CountingStub:
    """Deterministic evaluator returning accuracies derived from the sample."""

    def __init__(self):
        self.samples = []

    def evaluate_sample(self, sample, epoch):
        self.samples.append(sample)
        v = (sum(int(o) for o in sample.normal) % 11) / 10
        return AccuracyPair(v, min(1.0, v + 0.05))

    def state_dict(self):
        return {}

    def load_state_dict(self, state):
        pass


def sparse_quality(seed, gap=0.03):
    r = np.random.default_rng([seed, 99])
    out = {}
    for c in CELL_TYPES:
        m = np.zeros((NUM_EDGES, len(ALL_OPS)))
        m[np.arange(NUM_EDGES), r.integers(0, len(ALL_OPS), NUM_EDGES)] = gap
        out[c] = m
    return out


# ---------------------------------------------------------------- indicator


def test_indicator_arithmetic():
    assert compute_indicator(AccuracyPair(0.4, 0.6), 2.0) == pytest.approx(0.8)
    assert compute_indicator(AccuracyPair(0.4, 0.6), 0.0) == 0.4
    for beta in (0.0, 0.5, 1.0, 2.0, 7.0):
        assert compute_indicator(AccuracyPair(0.37, 0.37), beta) == 0.37


def test_accuracy_and_beta_validation():
    with pytest.raises(ValueError):
        AccuracyPair(1.2, 0.5)
    with pytest.raises(ValueError):
        IndicatorConfig(beta_p=-0.1)
    assert IndicatorConfig(beta_p=0).child_only


def test_budget_identity():
    assert total_search_epochs(8, 3) == 105 == 3 * (8 + 7 + 6 + 5 + 4 + 3 + 2)
    assert total_search_epochs(8, 2) == 70
    assert total_search_epochs(2, 1) == 2


# ---------------------------------------------------------------- softmax


def test_softmax_symmetry_and_normalisation():
    np.testing.assert_allclose(softmax_scores(np.full(5, 0.3)), 0.2)
    r = np.random.default_rng(0)
    for _ in range(100):
        z = r.uniform(0, 3, int(r.integers(2, 9)))
        assert abs(softmax_scores(z).sum() - 1) <= 1e-12


def test_softmax_two_op_high_precision_oracle():
    getcontext().prec = 40
    a, b = Decimal("0.8").exp(), Decimal("0.3").exp()
    want = [float(a / (a + b)), float(b / (a + b))]
    got = softmax_scores(np.array([0.8, 0.3]))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)
    assert [round(v, 5) for v in got] == [0.62246, 0.37754]


def test_softmax_shift_invariance():
    z = np.array([0.1, 0.7, 0.4])
    np.testing.assert_allclose(softmax_scores(z + 3.25), softmax_scores(z), atol=1e-15)


# ---------------------------------------------------------------- sampling


def test_singleton_candidates_sample_deterministically():
    st = SearchState.initial(0, 1, num_ops=2)
    for c in CELL_TYPES:
        for ops in st.candidates[c]:
            ops.pop()
    st._reset_round()
    s = sample_without_replacement(st)
    assert set(s.normal) == {OpKind.ZERO}


def test_one_repetition_covers_every_edge_op_exactly_once():
    st = SearchState.initial(5, 1)
    incidence = {c: np.zeros((NUM_EDGES, 8), int) for c in CELL_TYPES}
    for _ in range(8):
        s = sample_without_replacement(st)
        for c in CELL_TYPES:
            for e, op in enumerate(s.ops(c)):
                incidence[c][e, int(op)] += 1
        record(st, s, 0.5)
    for c in CELL_TYPES:
        assert np.all(incidence[c] == 1)
    assert st.round_complete


def test_oversampling_a_repetition_raises():
    st = SearchState.initial(0, 2, num_ops=2)
    for _ in range(2):
        record(st, sample_without_replacement(st), 0.1)
    st.slot = 2  # simulate a caller skipping record bookkeeping
    with pytest.raises(SearchError):
        sample_without_replacement(st)


def test_round_complete_blocks_further_sampling():
    st = SearchState.initial(0, 1, num_ops=2)
    for _ in range(2):
        record(st, sample_without_replacement(st), 0.1)
    with pytest.raises(SearchError):
        sample_without_replacement(st)


def test_double_record_rejected():
    st = SearchState.initial(0, 1)
    s = sample_without_replacement(st)
    record(st, s, 0.1)
    with pytest.raises(SearchError):
        record(st, s, 0.2)


# ---------------------------------------------------------------- elimination


def _filled_state(zbar_by_edge, seed=0):
    """State with K = len(zbar) whose every repetition score equals zbar."""
    k = len(zbar_by_edge[0])
    st = SearchState.initial(seed, 2, num_ops=k)
    for c in CELL_TYPES:
        st.scores[c][:] = np.asarray(zbar_by_edge)[:, :, None]
    st.rep = st.repetitions
    return st


def test_incomplete_scores_rejected():
    st = SearchState.initial(0, 1)
    with pytest.raises(SearchError):
        aggregate_scores(st, "normal", 0)
    with pytest.raises(SearchError):
        eliminate_worst(st)


def test_strict_minimum_removed():
    z = [[0.5, 0.9, 0.1, 0.7]] * NUM_EDGES
    st = _filled_state(z)
    removed = eliminate_worst(st)
    assert removed["normal"] == [OpKind(2)] * NUM_EDGES
    assert st.k == 3 and np.isnan(st.scores["normal"]).all()
    assert st.candidates["normal"][0] == [OpKind(0), OpKind(1), OpKind(3)]


def test_tie_break_lowest_enum():
    st = _filled_state([[0.5] * 8] * NUM_EDGES)
    assert eliminate_worst(st)["reduce"] == [OpKind.ZERO] * NUM_EDGES
    st2 = _filled_state([[0.9, 0.2, 0.9, 0.2]] * NUM_EDGES)
    assert eliminate_worst(st2)["normal"] == [OpKind.IDENTITY] * NUM_EDGES


def test_cannot_eliminate_last_candidate():
    st = SearchState.initial(0, 1, num_ops=2)
    for _ in range(2):
        record(st, sample_without_replacement(st), 0.1)
    eliminate_worst(st)
    assert st.finished
    with pytest.raises(SearchError):
        eliminate_worst(st)


def test_monte_carlo_true_worst_removed():
    """Additive per-op effect 0.05 apart plus N(0, 0.01) noise per repetition."""
    hits = 0
    r = np.random.default_rng(2024)
    for _ in range(100):
        q = r.permutation(8) * 0.05
        st = SearchState.initial(int(r.integers(1 << 30)), 3)
        for c in CELL_TYPES:
            st.scores[c][:] = q[None, :, None] + r.normal(0, 0.01, size=(NUM_EDGES, 8, 3))
        st.rep = 3
        removed = eliminate_worst(st)
        hits += removed["normal"][0] == OpKind(int(np.argmin(q)))
    assert hits >= 90


def test_trace_and_score_table():
    st = _filled_state([[0.5, 0.9, 0.1, 0.7]] * NUM_EDGES)
    eliminate_worst(st)
    tsv = score_table_tsv(st.trace[0]).splitlines()
    assert tsv[0] == "cell\tedge\top\tzbar\te\tremoved"
    assert len(tsv) == 1 + 2 * NUM_EDGES * 4
    flagged = [line for line in tsv[1:] if line.endswith("\t1")]
    assert len(flagged) == 2 * NUM_EDGES and all("\tdil_conv_3x3\t" in line for line in flagged)


# ---------------------------------------------------------------- driver


def test_full_schedule_budget_and_incidence():
    stub = CountingStub()
    res = run_search(IndicatorConfig(beta_p=2, repetitions=3), stub, seed=1)
    assert res.state.epochs == len(stub.samples) == 105
    assert res.state.eliminations == 7 and res.state.finished
    # replay the sample stream and audit every repetition
    idx = 0
    for k in range(8, 1, -1):
        for _t in range(3):
            block = stub.samples[idx : idx + k]
            idx += k
            for c in CELL_TYPES:
                for e in range(NUM_EDGES):
                    ops = [s.ops(c)[e] for s in block]
                    assert len(set(ops)) == k
    assert idx == 105
    assert res.genotype.meta["mode"] == "child-parent"


def test_smallest_loop():
    res = run_search(IndicatorConfig(repetitions=1, num_ops=2), CountingStub(), seed=0)
    assert res.state.epochs == 2 and res.state.eliminations == 1
    assert len(res.genotype.sample.normal) == NUM_EDGES


def test_candidate_sizes_shrink_in_lockstep():
    sizes = []
    run_search(IndicatorConfig(repetitions=1), CountingStub(), 3, on_round=lambda entry: sizes.append(entry["k"]))
    assert sizes == [8, 7, 6, 5, 4, 3, 2]


def test_beta_zero_scores_equal_child_accuracy_bitwise():
    a = run_search(IndicatorConfig(beta_p=0, repetitions=2), CountingStub(), seed=9)
    assert all(r["z"] == r["acc_child"] for r in a.history)
    assert a.genotype.meta["mode"] == "child-only"
    b = run_search(IndicatorConfig(beta_p=0, repetitions=2), CountingStub(), seed=9)
    assert a.history == b.history and a.genotype == b.genotype


def test_search_deterministic_per_seed():
    q = sparse_quality(4)
    runs = [run_search(IndicatorConfig(repetitions=2), PlantedEvaluator(q, 0.01, 4), 4) for _ in range(2)]
    assert runs[0].history == runs[1].history
    assert runs[0].genotype == runs[1].genotype


def test_planted_recovery_converges_with_repetitions():
    """Each sample's score mixes 28 edges, so recovery needs many repetitions."""
    for seed in range(2):
        ev = PlantedEvaluator(sparse_quality(seed), 0.01, seed, base=0.3)
        res = run_search(IndicatorConfig(repetitions=200), ev, seed)
        best = ev.best_ops()
        for c in CELL_TYPES:
            assert sum(a == b for a, b in zip(res.genotype.sample.ops(c), best[c])) >= 13


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    q = sparse_quality(1)
    cfg = IndicatorConfig(repetitions=1)
    full = run_search(cfg, PlantedEvaluator(q, 0.0, 1), 1)

    class Stop(Exception):
        pass

    path = str(tmp_path / "s.ckpt")

    def bomb(row):
        if row["epoch"] == 13:
            raise Stop

    with pytest.raises(Stop):
        run_search(cfg, PlantedEvaluator(q, 0.0, 1), 1, checkpoint_path=path, on_sample=bomb)
    state, history = load_search(path, PlantedEvaluator(q, 0.0, 1))
    # the interrupted sample was never checkpointed and is redone on resume
    assert state.epochs == 13 and len(history) == 13
    resumed = run_search(cfg, PlantedEvaluator(q, 0.0, 1), 1, checkpoint_path=path, resume=True)
    assert resumed.history == full.history
    assert resumed.genotype == full.genotype
