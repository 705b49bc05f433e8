import dataclasses
from importlib import resources

import numpy as np
import pytest

from regtrack.cphd import SensorModel
from regtrack.errors import ScenarioError
from regtrack.geometry import wrap_angle
from regtrack.sim.scenario import load_scenario, parse_scenario, validate_file
from regtrack.sim.simulate import generate_measurements, propagate_targets, run_monte_carlo, run_single, stream_rng
from regtrack.jsr import JsrConfig


def ref_text(name="ref_tree"):
    return (resources.files("regtrack") / "scenarios" / f"{name}.yaml").read_text()


@pytest.fixture(scope="module")
def tree():
    return load_scenario("ref_tree")


def short(sc, horizon=12, **kw):
    return dataclasses.replace(sc, horizon=horizon, **kw)


class TestScenario:
    @pytest.mark.parametrize("name", ["ref_tree", "ref_cycle"])
    def test_shipped_valid(self, name):
        path = resources.files("regtrack") / "scenarios" / f"{name}.yaml"
        assert validate_file(path) == []

    def test_true_params_consistent(self, tree):
        for i, j in tree.edges:
            d, g = tree.true_params(i, j)
            d2, g2 = tree.true_params(j, i)
            assert wrap_angle(g + g2) == pytest.approx(0.0, abs=1e-12)
            R = np.array([[np.cos(g), np.sin(g)], [-np.sin(g), np.cos(g)]])
            assert np.allclose(d2, -R @ d, atol=1e-9)
            assert np.allclose(tree.true_params(i, i)[0], 0.0)

    def test_antisymmetry_violation_names_pair(self):
        text = ref_text()
        lines = text.splitlines()
        k = lines.index("  - edge: [2, 1]")
        lines[k + 2] = "    orientation_deg: 10.0"
        with pytest.raises(ScenarioError) as exc:
            parse_scenario("\n".join(lines))
        msgs = [m for _, m in exc.value.violations]
        assert any("1-2 / 2-1" in m and "antisymmetric" in m for m in msgs) or any("2-1 / 1-2" in m for m in msgs)
        lines_hit = [ln for ln, m in exc.value.violations if "antisymmetric" in m]
        assert lines_hit and all(ln > 0 for ln in lines_hit)

    def test_weight_row_violation_names_node(self):
        W = np.array(load_scenario("ref_tree").weights)
        W[2, 2] -= 0.1
        rows = "\n".join("  - [" + ", ".join(repr(float(v)) for v in r) + "]" for r in W)
        text = ref_text() + "consensus_weights:\n" + rows + "\n"
        with pytest.raises(ScenarioError) as exc:
            parse_scenario(text)
        (line, msg), = [v for v in exc.value.violations if "sums to" in v[1]]
        assert "node 3" in msg and "0.9" in msg
        assert text.splitlines()[line - 1].startswith("  - [")

    def test_valid_custom_weights(self, tree):
        rows = "\n".join("  - [" + ", ".join(repr(float(v)) for v in r) + "]" for r in tree.weights)
        sc = parse_scenario(ref_text() + "consensus_weights:\n" + rows + "\n")
        assert np.allclose(sc.weights, tree.weights)

    def test_target_outside_region(self):
        text = ref_text().replace("[1000.0, 15.0, 2000.0, 8.0]", "[1000.0, -15.0, 2000.0, 8.0]")
        with pytest.raises(ScenarioError) as exc:
            parse_scenario(text)
        assert any("target 1 leaves" in m for _, m in exc.value.violations)

    def test_missing_and_bad_fields(self):
        text = ref_text().replace("  detection_prob: 0.98", "  detection_prob: 1.5").replace("horizon_steps: 300\n", "")
        with pytest.raises(ScenarioError) as exc:
            parse_scenario(text)
        msgs = [m for _, m in exc.value.violations]
        assert any("horizon_steps" in m for m in msgs)
        assert any("detection_prob" in m for m in msgs)

    def test_not_yaml(self):
        with pytest.raises(ScenarioError):
            parse_scenario("a: [1, 2\nb: 3")


class TestPropagate:
    def test_reference_schedule(self, tree):
        card = [len(propagate_targets(tree, t)) for t in range(1, 301)]
        expect = [4] * 100 + [5] * 20 + [6] * 40 + [5] * 40 + [4] * 100
        assert card == expect

    def test_before_birth_empty(self, tree):
        assert len(propagate_targets(tree, 0)) == 0
        with pytest.raises(ValueError):
            propagate_targets(tree, 301)

    def test_constant_velocity(self, tree):
        sc = dataclasses.replace(tree, truth_accel_std=0.0)
        x = [propagate_targets(sc, t)[1] for t in (1, 2, 3)]
        v = x[0][[1, 3]]
        assert np.allclose(x[1][[0, 2]] - x[0][[0, 2]], v)
        assert np.allclose(x[2][[0, 2]] - x[1][[0, 2]], v)

    def test_trajectories_fixed(self, tree):
        again = load_scenario("ref_tree")
        assert np.array_equal(np.nan_to_num(tree.trajectories), np.nan_to_num(again.trajectories))


class TestMeasurements:
    def sensor(self, p_d, lam, R=np.diag([4.0, np.deg2rad(0.1) ** 2])):
        return SensorModel("range_bearing", R, p_d, lam, 64e6)

    def test_empty(self, tree):
        z = generate_measurements(tree, propagate_targets(tree, 5), 0, 5, stream_rng(0, 0, 0, 5), self.sensor(0.0, 0.0))
        assert z.shape == (0, 2)

    def test_noiseless_identity(self, tree):
        sc = dataclasses.replace(tree, node_positions=np.zeros((6, 2)), node_headings=np.zeros(6))
        truth = propagate_targets(sc, 7)
        z = generate_measurements(sc, truth, 0, 7, stream_rng(0, 0, 0, 7), self.sensor(1.0, 0.0, np.zeros((2, 2))))
        assert np.allclose(z[:, 0], np.hypot(truth[:, 0], truth[:, 2]), atol=1e-12)
        assert np.allclose(z[:, 1], np.arctan2(truth[:, 0], truth[:, 2]), atol=1e-12)

    def test_local_frame(self, tree):
        truth = propagate_targets(tree, 7)
        z = generate_measurements(tree, truth, 3, 7, stream_rng(0, 0, 3, 7), self.sensor(1.0, 0.0, np.zeros((2, 2))))
        loc = tree.to_local(3, truth)
        assert np.allclose(z[:, 0], np.hypot(loc[:, 0], loc[:, 2]))

    def test_clutter_mean_and_bearing_range(self, tree):
        s = self.sensor(0.0, 20.0)
        counts, bearings = [], []
        for k in range(10000):
            z = generate_measurements(tree, np.zeros((0, 4)), 1, k, stream_rng(3, 0, 1, k), s)
            counts.append(len(z))
            bearings.append(z[:, 1])
        assert abs(np.mean(counts) - 20.0) < 0.5
        b = np.concatenate(bearings)
        assert np.all(b >= -np.pi) and np.all(b < np.pi)

    def test_detection_frequency(self, tree):
        s = self.sensor(0.98, 0.0)
        truth = propagate_targets(tree, 10)
        n = 3000
        hits = sum(len(generate_measurements(tree, truth, 0, 10, stream_rng(5, r, 0, 10), s)) for r in range(n))
        trials = n * len(truth)
        sd = np.sqrt(trials * 0.98 * 0.02)
        assert abs(hits - 0.98 * trials) < 3 * sd

    def test_streams_distinct_and_repeatable(self):
        a = stream_rng(1, 2, 3, 4).random(4)
        assert np.array_equal(a, stream_rng(1, 2, 3, 4).random(4))
        assert not np.array_equal(a, stream_rng(1, 2, 3, 5).random(4))
        assert not np.array_equal(a, stream_rng(1, 3, 2, 4).random(4))


class TestMonteCarlo:
    def test_deterministic(self, tree):
        sc = short(tree, 8)
        cfg = JsrConfig.from_scenario(sc, mode="ccphd-pk", consensus_on_time=4)
        a = run_single(sc, cfg, 0, 7)
        b = run_single(sc, cfg, 0, 7)
        for f in ("ospa", "cardinality", "drift_error", "gamma_error", "consensus_steps"):
            assert np.array_equal(getattr(a, f), getattr(b, f))

    def test_workers_do_not_matter(self, tree):
        sc = short(tree, 5)
        cfg = JsrConfig.from_scenario(sc, mode="local-only")
        one = run_monte_carlo(sc, cfg, 2, 3, workers=1)
        two = run_monte_carlo(sc, cfg, 2, 3, workers=2)
        for a, b in zip(one, two):
            assert a.run == b.run
            assert np.array_equal(a.ospa, b.ospa)

    def test_invalid_runs(self, tree):
        with pytest.raises(ValueError):
            run_monte_carlo(tree, JsrConfig(), 0)

    def test_pk_zero_registration_error(self, tree):
        sc = short(tree, 3)
        rec = run_single(sc, JsrConfig.from_scenario(sc, mode="ccphd-pk"), 0, 1)
        assert np.allclose(rec.drift_error, 0.0, atol=1e-9)
        assert np.allclose(rec.gamma_error, 0.0, atol=1e-12)
