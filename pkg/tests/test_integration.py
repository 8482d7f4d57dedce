"""Full-recipe integration checks on the shared full-scale fleet:
mechanism statistics, gap sizes, faithfulness correlation, and end-to-end
report plumbing."""

import csv

import numpy as np

from maxk.cli import run_sweep
from maxk.linalg import svd
from maxk.metrics import interpretation_stats, normalized_bound
from maxk.model import forward, predict, save_model
from maxk.subcubic import QkDecomps, StrategyConfig, compute_gap_table, subcubic_bound


def spearman(a, b):
    ra = np.argsort(np.argsort(a))
    rb = np.argsort(np.argsort(b))
    return float(np.corrcoef(ra, rb)[0, 1])


class TestTrainedMechanism:
    def test_prediction_spot_check(self, full_fleet):
        for entry in full_fleet:
            logits = forward(entry.params, np.array([5, 63, 2, 7]))
            assert predict(logits) == 63

    def test_query_direction_is_nearly_uniform(self, full_fleet):
        # the top left singular vector of the score table stays close to
        # the constant vector 1/sqrt(d_vocab)
        for entry in full_fleet:
            u, s, v = svd(entry.paths.eqke, rank=1)
            direction = u[:, 0]
            assert abs(abs(direction).mean() - 1 / 8) < 0.03
            assert direction.std() < 0.06

    def test_copy_threshold_is_small(self, full_fleet):
        thresholds = [interpretation_stats(e.paths).copy_threshold for e in full_fleet]
        assert max(thresholds) <= 16

    def test_gap_entries_mostly_small(self, full_fleet):
        entry = full_fleet[0]
        table = compute_gap_table(entry.paths)
        used = []
        for tm in range(8, 64):
            for tq in range(tm + 1):
                for c in range(1, 4):
                    g = table.g[tm, tq, c]
                    if g < tm:
                        used.append(int(g))
        used = np.array(used)
        assert np.median(used) <= 6
        assert (used <= 6).mean() >= 0.7

    def test_faithfulness_rank_correlation_nonnegative(self, full_fleet):
        # tighter rank-one structure in the score table should not hurt the
        # normalized bound of the spectral strategy
        ratios, norms = [], []
        for entry in full_fleet:
            ratios.append(interpretation_stats(entry.paths).sigma_ratio)
            cert = subcubic_bound(
                entry.params,
                StrategyConfig("max_diff_exact", "svd", True),
                decomps=QkDecomps(entry.paths),
            )
            norms.append(normalized_bound(cert, entry.exact.bound))
        rho = spearman(np.array(ratios), np.array(norms))
        print(f"\nsigma-ratio vs normalized bound rank correlation: {rho:.3f}")
        assert rho >= 0.0


class TestEndToEndSweep:
    def test_full_scale_sweep_rows(self, full_fleet, tmp_path):
        models_dir = tmp_path / "models"
        models_dir.mkdir()
        for entry in full_fleet[:2]:
            save_model(entry.params, models_dir / f"seed{entry.seed}.maxk",
                       metadata={"config": {"seed": entry.seed}})
        strategies = [
            "brute_force",
            "cubic",
            StrategyConfig("max_diff_exact", "max_diff_exact", True).strategy_id,
        ]
        out = tmp_path / "results.csv"
        run_sweep(sorted(models_dir.glob("*.maxk")), strategies, out)
        with out.open() as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 6
        by_model = {}
        for row in rows:
            by_model.setdefault(row["model_path"], {})[row["strategy_id"]] = row
        for model_rows in by_model.values():
            brute = float(model_rows["brute_force"]["bound"])
            cubic = float(model_rows["cubic"]["bound"])
            sub = float(model_rows[strategies[2]]["bound"])
            assert brute >= cubic >= sub  # tightness ordering at full scale
            assert int(model_rows["brute_force"]["flops"]) > int(model_rows["cubic"]["flops"]) > int(
                model_rows[strategies[2]]["flops"]
            )
