"""Release gate: one test per property the finished package must satisfy.

Run ``pytest tests/test_acceptance.py -v`` to get a single pass/fail line
per property. Tolerances and trial counts are pinned here on purpose;
helper modules must not weaken them.
"""

import time

import numpy as np
import pytest

from oracles import (
    brute_force_gmad,
    oracle_no_moe_forward,
    pooled_readouts,
    ridge_srcc,
)
from vqmoe import tensor as tz
from vqmoe.checkpoint import load_checkpoint, save_checkpoint
from vqmoe.dataset import gen_synthetic, load_samples, make_splits
from vqmoe.gmad import gmad_pairs
from vqmoe.gradcheck import micro_config, run_gradient_check
from vqmoe.metrics import krcc, plcc, srcc
from vqmoe.model import ModelConfig, ablation_config, full_forward, init_params
from vqmoe.moe import Expert, GatingMatrix, mix_experts, structured_weights
from vqmoe.mos import RatingRecord, consolidate, select_lambda
from vqmoe.tensor import Tape, Tensor, backward
from vqmoe.tensorio import from_bytes, to_bytes
from vqmoe.training import (
    TrainSchedule,
    get_param_state,
    set_param_state,
    train,
    validation_srcc,
)

DESK = ModelConfig(
    t_frames=4, height=4, width=4, l_tokens=4, channels=16,
    m_spatial=4, n_temporal=4, z_alignment=4, k=2, dtype="float32",
)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """400 planted videos (sigma=0.1) plus their 10 stratified splits."""
    root = tmp_path_factory.mktemp("gate")
    records, _ = gen_synthetic(DESK, 400, 0.1, 7, root)
    samples = load_samples(records, root)
    return {
        "records": records,
        "by_id": {s.video_id: s for s in samples},
        "splits": make_splits(records, seed_count=10),
    }


def _dense(weights, n: int) -> np.ndarray:
    out = np.zeros(n)
    for pos, idx in enumerate(weights.indices):
        out[idx] = weights.weights.data[pos]
    return out


class TestReleaseGate:
    def test_gradient_suite_matches_finite_differences(self):
        """Every parameter gradient matches central differences at both k."""
        start = time.monotonic()
        for k in (1, 2):
            report = run_gradient_check(
                config=micro_config(k=k), step=1e-4, tol=1e-4
            )
            assert report.passed, report.worst()
            assert report.max_rel_err < 1e-4
        assert time.monotonic() - start < 60.0

    def test_routing_invariants_thousand_randomized_trials(self):
        """Permutation equivariance, sparsity, unit mass, dead-expert grads."""
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            m = int(rng.integers(2, 6))
            n = int(rng.integers(2, 6))
            k = int(rng.integers(1, min(m, n) + 1))
            logits = rng.normal(size=(m, n))

            def route(mat):
                g = tz.reshape(tz.softmax(Tensor(mat.reshape(-1))), (m, n))
                return structured_weights(GatingMatrix(g, m, n), k)

            rows, cols, j_rows, j_cols = route(logits)
            for w, extent in ((rows, m), (cols, n), (j_rows, m), (j_cols, n)):
                vec = _dense(w, extent)
                assert np.count_nonzero(vec) <= k
                assert abs(vec.sum() - 1.0) <= 1e-9

            perm_r = rng.permutation(m)
            perm_c = rng.permutation(n)
            rows_p, cols_p, j_rows_p, j_cols_p = route(logits[perm_r][:, perm_c])
            assert np.array_equal(_dense(rows_p, m), _dense(rows, m)[perm_r])
            assert np.array_equal(_dense(cols_p, n), _dense(cols, n)[perm_c])
            assert np.array_equal(_dense(j_rows_p, m), _dense(j_rows, m)[perm_r])
            assert np.array_equal(_dense(j_cols_p, n), _dense(j_cols, n)[perm_c])

            pool = [Expert.init(rng, 3, 4) for _ in range(m)]
            x = Tensor(rng.normal(size=3))
            with Tape() as tape:
                out = mix_experts(rows, pool, x)
                loss = tz.sum_pool(tz.square(out), (0,))
            grads = backward(tape, loss)
            for idx, expert in enumerate(pool):
                if idx not in rows.indices:
                    for _, p in expert.named_params("e"):
                        assert np.array_equal(grads[p], np.zeros_like(p.data))

    def test_single_expert_collapse_matches_straight_line_oracle(self):
        """With one expert per pool the model equals a no-routing pipeline."""
        cfg = micro_config(m_spatial=1, n_temporal=1, z_alignment=1, k=1)
        params = init_params(cfg, seed=11)
        rng = np.random.default_rng(12)
        mask = [True] * (cfg.l_tokens - 1)
        for _ in range(100):
            f_vst = Tensor(rng.normal(
                size=(cfg.t_frames, cfg.height, cfg.width, cfg.channels)))
            f_blip = Tensor(rng.normal(
                size=(cfg.t_frames, cfg.l_tokens, cfg.channels)))
            bundle = full_forward(f_vst, f_blip, mask, params)
            want = oracle_no_moe_forward(params, f_vst.data, f_blip.data)
            assert abs(bundle.q_spatial.item() - want["q_spatial"]) <= 1e-9
            assert abs(bundle.q_temporal.item() - want["q_temporal"]) <= 1e-9
            assert abs(
                bundle.q_overall_percept.item() - want["q_overall_percept"]
            ) <= 1e-9
            assert abs(bundle.q_sentence.item() - want["q_sentence"]) <= 1e-9
            assert np.abs(bundle.q_word.data - np.asarray(want["q_word"])).max() <= 1e-9

    def test_all_seven_ablation_rows_instantiate_and_run(self):
        """The switch grid produces the advertised parameter-set differences."""
        base = micro_config(k=1)
        rng = np.random.default_rng(21)
        f_vst = Tensor(rng.normal(
            size=(base.t_frames, base.height, base.width, base.channels)))
        f_blip = Tensor(rng.normal(
            size=(base.t_frames, base.l_tokens, base.channels)))
        mask = [True] * (base.l_tokens - 1)

        names_by_row = {}
        for row in range(1, 8):
            cfg = ablation_config(base, row)
            params = init_params(cfg, seed=22)
            names_by_row[row] = set(params.param_dict())
            bundle = full_forward(f_vst, f_blip, mask, params)
            for value in bundle.as_floats().values():
                if value is not None:
                    flat = np.atleast_1d(np.asarray(value, dtype=float))
                    assert np.isfinite(flat).all()

        def has(row, prefix):
            return any(n.startswith(prefix) for n in names_by_row[row])

        assert not has(1, "fusion.")  # row 1: raw features, no fusion block
        assert not has(1, "gate.") and not has(1, "experts.")
        assert has(2, "fusion.") and not has(2, "gate.")
        assert not has(3, "gate.") and has(3, "head.spatial.")
        assert has(4, "gate.alignment.") and not has(4, "gate.perceptual.")
        assert has(5, "gate.perceptual.") and not has(5, "gate.alignment.")
        # row 6: independent 1-D gates replace the shared 2-D gating matrix
        row6_gates = {n for n in names_by_row[6] if n.startswith("gate.")}
        assert row6_gates and all("_1d." in n for n in row6_gates)
        assert has(7, "gate.perceptual.") and has(7, "gate.alignment.")
        assert len({frozenset(v) for v in names_by_row.values()}) == 7

    def test_synthetic_end_to_end_reaches_held_out_srcc(self, corpus):
        """Planted-signal training recovers rank order on unseen videos."""
        start = time.monotonic()
        spec = corpus["splits"][0]
        train_s = [corpus["by_id"][v] for v in spec.ids_for("train")]
        val_s = [corpus["by_id"][v] for v in spec.ids_for("val")]
        test_s = [corpus["by_id"][v] for v in spec.ids_for("test")]

        # Feasibility certificate: an independent linear readout of the
        # designated channels must already rank the held-out set.
        feats, labels = pooled_readouts(test_s, DESK)
        for dim in ("overall_percept", "sentence"):
            assert ridge_srcc(feats[dim], labels[dim]) >= 0.9

        schedule = TrainSchedule(lr0=5e-3, epochs=10, batch_size=4, seed=0)
        assert schedule.epochs <= 30
        result = train(train_s, val_s, DESK, schedule=schedule)
        assert not result.aborted, result.abort_reason
        set_param_state(result.params, result.best_state)
        held_out = validation_srcc(result.params, test_s)
        assert held_out["overall_percept"] >= 0.8
        assert held_out["sentence"] >= 0.8
        assert time.monotonic() - start < 600.0

    def test_subjective_screening_fixtures(self):
        """Kurtosis gate, exclusion counts, and annotator rejection law."""
        # (a) 16 ratings: beta2 ~ 3.10 selects lambda=2; the two extremes
        # fall outside mu +/- 2*sigma; the surviving mean is exactly 42/14.
        scores = [1, 2, 2, 2, 3, 3, 3, 3, 3, 3, 3, 3, 4, 4, 4, 5]
        ratings = [
            RatingRecord(f"a{i:02d}", "v0", "overall_percept", s)
            for i, s in enumerate(scores, start=1)
        ]
        lam, info = select_lambda(scores)
        assert info["beta2"] == pytest.approx(3.1020408163265305, abs=1e-12)
        assert round(info["beta2"], 2) == 3.10
        assert lam == 2.0
        report, labels = consolidate(ratings)
        cell = report.cells[("v0", "overall_percept")]
        assert cell.lam == 2.0
        assert len(cell.excluded) == 2
        assert sorted(scores[i] for i in cell.excluded) == [1, 5]
        assert labels["v0"]["q_overall_percept"] == 42.0 / 14.0 == 3.0

        # (b) {1,1,1,1,5}: the spike inflates beta2 but stays inside the
        # widened band, so nothing is excluded.
        ratings = [
            RatingRecord(f"b{i}", "v1", "spatial", s)
            for i, s in enumerate([1, 1, 1, 1, 5])
        ]
        report, labels = consolidate(ratings)
        cell = report.cells[("v1", "spatial")]
        assert cell.excluded == ()
        assert labels["v1"]["q_spatial"] == pytest.approx(9.0 / 5.0)

        # (c) a uniform-random annotator on top of 14 consistent raters
        # exceeds the 5% outlier budget and is rejected; every consistent
        # rater survives.
        rng = np.random.default_rng(3)
        honest = [2, 2, 2, 3, 3, 3, 3, 3, 3, 3, 3, 4, 4, 4]
        ratings = []
        for vid in range(20):
            for i, s in enumerate(honest, start=1):
                ratings.append(
                    RatingRecord(f"h{i:02d}", f"w{vid:02d}", "sentence", s)
                )
            ratings.append(
                RatingRecord("rnd", f"w{vid:02d}", "sentence",
                             int(rng.integers(1, 6)))
            )
        report, _ = consolidate(ratings)
        assert report.annotators["rnd"].rejected
        for i in range(1, 15):
            assert not report.annotators[f"h{i:02d}"].rejected

    def test_metric_suite_invariances_and_pair_search(self):
        """Rank metrics, affine PLCC, the 3-point fixture, and gMAD parity."""
        rng = np.random.default_rng(40)
        x = rng.normal(size=60)
        y = rng.normal(size=60)
        assert srcc(np.exp(x), y) == srcc(x, y)
        assert krcc(np.exp(x), y) == krcc(x, y)
        assert srcc(x ** 3, y) == srcc(x, y)
        assert plcc(2.5 * x - 7.0, y) == pytest.approx(plcc(x, y), abs=1e-9)
        assert plcc(-3.0 * x + 1.0, y) == pytest.approx(-plcc(x, y), abs=1e-9)
        assert krcc([1.0, 2.0, 3.0], [1.0, 3.0, 2.0]) == pytest.approx(
            1.0 / 3.0, abs=1e-12
        )

        for n in (2, 17, 200):
            ids = [f"clip{i:03d}" for i in range(n)]
            defender = {v: float(rng.integers(0, 12)) / 2.0 for v in ids}
            attacker = {v: float(rng.normal()) for v in ids}
            for eps in (0.0, 0.5, None):
                for top_n in (1, 10):
                    got = gmad_pairs(defender, attacker, eps=eps, top_n=top_n)
                    eff = eps if eps is not None else 0.05 * (
                        max(defender.values()) - min(defender.values())
                    )
                    want = brute_force_gmad(defender, attacker, eff, top_n)
                    assert [(p.video_a, p.video_b) for p in got] == [
                        (a, b) for a, b, _ in want
                    ]
                    for p, (_, _, d) in zip(got, want):
                        assert p.attacker_delta == pytest.approx(d)

    def test_split_balance_exhaustive(self, corpus):
        """All 10 seeds keep every (model, category) stratum within 1 of 6:2:2."""
        strata: dict[tuple, list] = {}
        for rec in corpus["records"]:
            strata.setdefault(
                (rec.generator_model, rec.category), []
            ).append(rec.video_id)
        assert len(strata) == 40
        assert all(len(v) == 10 for v in strata.values())

        assert len(corpus["splits"]) == 10
        quota = {"train": 6, "val": 2, "test": 2}
        for spec in corpus["splits"]:
            assert sorted(spec.assignment) == sorted(
                r.video_id for r in corpus["records"]
            )
            for members in strata.values():
                counts = {"train": 0, "val": 0, "test": 0}
                for vid in members:
                    counts[spec.assignment[vid]] += 1
                assert sum(counts.values()) == 10
                for name, want in quota.items():
                    assert abs(counts[name] - want) <= 1

    def test_format_round_trips_and_training_determinism(self, tmp_path):
        """Bit-identical tensor files, checkpoints, and same-seed reruns."""
        rng = np.random.default_rng(50)
        for dtype in ("float32", "float64"):
            for shape in ((), (3,), (2, 3), (2, 3, 4), (1, 2, 3, 4), (2, 1, 2, 1, 2)):
                arr = rng.normal(size=shape).astype(dtype)
                blob = to_bytes(arr)
                assert blob == to_bytes(arr)
                back = from_bytes(blob).data
                assert back.dtype == arr.dtype
                assert back.shape == arr.shape
                assert back.tobytes() == arr.tobytes()

        params = init_params(DESK, seed=51)
        state = get_param_state(params)
        p1, p2 = tmp_path / "a.zip", tmp_path / "b.zip"
        save_checkpoint(p1, DESK, state, epoch=4)
        loaded = load_checkpoint(p1)
        assert loaded.epoch == 4
        assert loaded.config == DESK
        assert sorted(loaded.state) == sorted(state)
        for name in state:
            assert loaded.state[name].tobytes() == state[name].tobytes()
        save_checkpoint(p2, DESK, loaded.state, epoch=4)
        assert p1.read_bytes() == p2.read_bytes()

        cfg = micro_config()
        records, _ = gen_synthetic(cfg, 12, 0.3, 60, tmp_path / "tiny")
        samples = load_samples(records, tmp_path / "tiny")
        schedule = TrainSchedule(lr0=1e-3, epochs=2, batch_size=4, seed=6)
        runs = [
            train(samples[:8], samples[8:], cfg, schedule=schedule)
            for _ in range(2)
        ]
        assert runs[0].log == runs[1].log
        for name, arr in runs[0].final_state.items():
            assert arr.tobytes() == runs[1].final_state[name].tobytes()
        for name, arr in runs[0].best_state.items():
            assert arr.tobytes() == runs[1].best_state[name].tobytes()
