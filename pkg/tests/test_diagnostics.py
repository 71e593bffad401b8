import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import torch

from src.core import diagnostics
from src.core.data_toy import TokenSequence, make_pairs
from src.core.errors import TraceLevelError, UsageError
from src.core.model import ForwardTrace, ModelConfig, build_model, causal_mask, params_checksum
from src.core.numerics import masked_softmax


def _trace(attention):
    """ForwardTrace around a [B, heads, T, T] map shared by two layers."""
    batch, _, length, _ = attention.shape
    hidden = torch.zeros(batch, length, 4)
    return ForwardTrace([hidden, hidden], torch.zeros(batch, length, 3), [attention, attention], "full")


def _random_attention(batch, heads, length, seed):
    generator = torch.Generator().manual_seed(seed)
    scores = torch.randn(batch, heads, length, length, generator=generator, dtype=torch.float64) * 2
    return masked_softmax(scores, causal_mask(length, torch.float64))


def _sequences(config, count, seed=0):
    rng = np.random.default_rng(seed)
    return [TokenSequence(rng.integers(0, config.vocab_size, config.seq_len), i % config.num_classes,
                          config.grid_width) for i in range(count)]


class TestLocality:
    def test_all_mass_on_condition(self):
        attention = torch.zeros(2, 2, 4, 4, dtype=torch.float64)
        attention[..., 0] = 1.0
        profile = diagnostics.attention_locality([_trace(attention)], grid_side=2)
        np.testing.assert_array_equal(profile.mass_on_condition, np.ones((2, 4)))
        np.testing.assert_array_equal(profile.mean_distance, np.zeros((2, 4)))
        assert profile.traces == 2

    def test_attending_the_previous_token(self):
        attention = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        attention[0, 0, 0, 0] = 1.0
        for t in range(1, 4):
            attention[0, 0, t, t] = 1.0
        profile = diagnostics.attention_locality([_trace(attention)], grid_side=2)
        np.testing.assert_allclose(profile.mass_on_neighbors[0], [0.0, 1.0, 1.0, 1.0])
        np.testing.assert_allclose(profile.mean_distance[0], [0.0, 1.0, math.sqrt(2.0), 1.0])

    def test_far_key_is_elsewhere(self):
        # 3x3 grid: query row 8 predicts cell (2, 2); key 1 holds cell (0, 0)
        attention = torch.zeros(1, 1, 9, 9, dtype=torch.float64)
        attention[0, 0, :, 0] = 1.0
        attention[0, 0, 8, 0] = 0.0
        attention[0, 0, 8, 1] = 1.0
        profile = diagnostics.attention_locality([_trace(attention)], grid_side=3)
        assert profile.mass_elsewhere[0, 8] == 1.0
        assert profile.mean_distance[0, 8] == pytest.approx(math.sqrt(8.0))

    def test_matches_a_loop_oracle(self):
        side, length = 3, 9
        attention = _random_attention(3, 2, length, seed=5)
        profile = diagnostics.attention_locality([_trace(attention)], grid_side=side)
        mean = attention.mean(dim=1).mean(dim=0).numpy()
        for t in range(length):
            qr, qc = divmod(t, side)
            near = far = weighted = 0.0
            for j in range(1, t + 1):
                kr, kc = divmod(j - 1, side)
                if max(abs(qr - kr), abs(qc - kc)) <= 1:
                    near += mean[t, j]
                else:
                    far += mean[t, j]
                weighted += mean[t, j] * math.hypot(qr - kr, qc - kc)
            tokens = 1.0 - mean[t, 0]
            assert profile.mass_on_neighbors[0, t] == pytest.approx(near, abs=1e-12)
            assert profile.mass_elsewhere[0, t] == pytest.approx(far, abs=1e-12)
            expected = weighted / tokens if tokens > 1e-12 else 0.0
            assert profile.mean_distance[0, t] == pytest.approx(expected, abs=1e-10)

    def test_buckets_partition_the_row(self):
        profile = diagnostics.attention_locality([_trace(_random_attention(2, 2, 16, seed=1))], grid_side=4)
        total = profile.mass_on_condition + profile.mass_on_neighbors + profile.mass_elsewhere
        np.testing.assert_allclose(total, np.ones_like(total), atol=1e-12)

    def test_needs_full_traces(self, tiny_model, tiny_tokens):
        with pytest.raises(TraceLevelError):
            diagnostics.attention_locality([tiny_model(*tiny_tokens)], grid_side=4)

    def test_length_must_fill_the_grid(self):
        with pytest.raises(UsageError):
            diagnostics.bucket_geometry(10, 3)

    def test_model_traces(self, tiny_config, tiny_model):
        traces = diagnostics.collect_traces(tiny_model, _sequences(tiny_config, 5), batch_size=2)
        assert len(traces) == 3
        profile = diagnostics.attention_locality(traces, grid_side=4)
        assert profile.traces == 5
        assert profile.mean_attention.shape == (2, 16, 16)
        summary = diagnostics.summarize_profile(profile)
        assert set(summary) == {"mean_distance", "mass_on_condition", "mass_on_neighbors", "mass_elsewhere"}


class TestProbe:
    def test_separable_features(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 3, 60)
        x = np.eye(3)[labels] + rng.normal(0, 0.01, (60, 3))
        accuracy = diagnostics.fit_linear_probe(x[:48], labels[:48], x[48:], labels[48:], 3)
        assert accuracy == 1.0

    def test_random_features_score_near_chance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2000, 8))
        labels = rng.integers(0, 4, 2000)
        accuracy = diagnostics.fit_linear_probe(x[:1600], labels[:1600], x[1600:], labels[1600:], 4)
        assert abs(accuracy - 0.25) < 0.1

    def test_split(self):
        train, test = diagnostics.split_indices(10, 0.8, seed=0)
        assert len(train) == 8 and len(test) == 2
        assert sorted(np.concatenate([train, test]).tolist()) == list(range(10))
        with pytest.raises(UsageError):
            diagnostics.split_indices(3, 0.1, seed=0)

    def test_first_step_sees_only_the_null_condition(self, tiny_config, tiny_model):
        features = diagnostics.step_features(tiny_model, _sequences(tiny_config, 4), layer=1, steps=[1, 5])
        first = features[1]
        np.testing.assert_allclose(first, np.broadcast_to(first[0], first.shape), atol=1e-6)
        assert not np.allclose(features[5], features[5][0])

    def test_step_bounds(self, tiny_config, tiny_model):
        with pytest.raises(UsageError):
            diagnostics.step_features(tiny_model, _sequences(tiny_config, 2), layer=1, steps=[17])

    def test_per_step_report_leaves_the_model_alone(self, tiny_config, tiny_model):
        before = params_checksum(tiny_model)
        report = diagnostics.probe_per_step(tiny_model, _sequences(tiny_config, 20), steps=[1, 8, 16],
                                            layer=1, epochs=5, seed=0)
        assert params_checksum(tiny_model) == before
        assert sorted(report.accuracies) == [1, 8, 16]
        assert report.train_size == 16 and report.test_size == 4
        assert report.chance == 0.25
        assert all(0.0 <= a <= 1.0 for a in report.accuracies.values())

    def test_null_label_rejected(self, tiny_config, tiny_model):
        with pytest.raises(UsageError):
            diagnostics.probe_per_step(tiny_model, _sequences(tiny_config, 10), steps=[1], layer=1,
                                       labels=[tiny_config.null_id] * 10)

    def test_report_dict_round_trip(self):
        report = diagnostics.ProbeReport({1: 0.5, 4: 0.75}, [1, 4], 2, 10, 4, 8, 2)
        assert diagnostics.probe_from_dict(diagnostics.probe_to_dict(report)) == report


class TestInvariance:
    def test_identical_views(self, toy_images, toy_codebook):
        config = ModelConfig(layers=2, width=16, heads=2, vocab_size=8, seq_len=16, num_classes=3, tap_depth=1,
                             mlp_ratio=2)
        pairs = make_pairs(toy_images[:3], views=2, seed=0, augmented=False)
        record = diagnostics.view_invariance(pairs, toy_codebook, 4, model=build_model(config, 0))
        assert record["token_change_rate"] == 0.0
        assert record["feature_cosine"] == pytest.approx(1.0, abs=1e-6)

    def test_without_a_model(self, toy_images, toy_codebook):
        record = diagnostics.view_invariance(make_pairs(toy_images, 2, seed=3), toy_codebook, 4)
        assert 0.0 <= record["token_change_rate"] <= 1.0
        assert record["feature_cosine"] is None

    def test_empty(self, toy_codebook):
        with pytest.raises(UsageError):
            diagnostics.view_invariance([], toy_codebook, 4)


class TestCompare:
    def test_verdicts(self):
        base = {"locality": {"mean_distance": 1.0, "mass_elsewhere": 0.2},
                "probe": {1: 0.3, 4: 0.4, 8: 0.5, 16: 0.5},
                "invariance": {"token_change_rate": 0.4, "feature_cosine": 0.5}}
        star = {"locality": {"mean_distance": 1.5, "mass_elsewhere": 0.1},
                "probe": {1: 0.35, 4: 0.5, 8: 0.6, 16: 0.4},
                "invariance": {"token_change_rate": 0.4, "feature_cosine": 0.8}}
        verdicts = {v["claim"]: v["holds"] for v in diagnostics.compare_runs(base, star)}
        assert verdicts["final-layer mean attention distance is larger"]
        assert not verdicts["final-layer mass_elsewhere is larger"]
        assert verdicts["probe accuracy >= baseline at >= 3/4 of the steps"]
        assert not verdicts["late-step accuracy stays within 5 points of the mid-step peak"]
        assert verdicts["inter-view feature cosine is higher"]
        assert verdicts["tokenizer changes > 20% of tokens across views"]

    def test_missing_entries_are_skipped(self):
        assert diagnostics.compare_runs({}, {"probe": {1: 0.5}}) == []


class TestReport:
    def _inputs(self):
        profile = diagnostics.attention_locality([_trace(_random_attention(2, 2, 4, seed=0))], grid_side=2)
        probe = diagnostics.ProbeReport({1: 0.25, 4: 0.5}, [1, 4], 1, 5, 4)
        return ({"star": profile}, {"star": probe},
                {"star": {"token_change_rate": 0.3, "feature_cosine": 0.9},
                 "baseline": {"token_change_rate": 0.3, "feature_cosine": None}})

    def test_empty_inputs_write_headers(self, tmp_path):
        written = diagnostics.render_report({}, {}, {}, str(tmp_path))
        assert [p.rsplit("/", 1)[-1] for p in written] == ["invariance.csv", "locality.csv", "probe.csv"]
        assert (tmp_path / "probe.csv").read_text() == ",".join(diagnostics.PROBE_FIELDS) + "\n"

    def test_files_and_svg(self, tmp_path):
        written = diagnostics.render_report(*self._inputs(), str(tmp_path))
        names = {p.rsplit("/", 1)[-1] for p in written}
        assert {"attention_star_layer1.svg", "attention_star_layer2.svg", "locality_distance.svg",
                "probe.svg"} <= names
        for name in names:
            if name.endswith(".svg"):
                assert ET.parse(tmp_path / name).getroot().tag.endswith("svg")

    def test_csv_values_round_trip(self, tmp_path):
        profiles, probes, invariances = self._inputs()
        diagnostics.render_report(profiles, probes, invariances, str(tmp_path))
        rows = diagnostics.read_csv(str(tmp_path / "locality.csv"))
        assert len(rows) == 2 * 4
        row = rows[5]
        assert float(row["mass_on_neighbors"]) == profiles["star"].mass_on_neighbors[int(row["layer"]) - 1,
                                                                                      int(row["step"]) - 1]
        invariance = {r["run"]: r for r in diagnostics.read_csv(str(tmp_path / "invariance.csv"))}
        assert invariance["baseline"]["feature_cosine"] == ""
        assert float(invariance["star"]["feature_cosine"]) == 0.9

    def test_byte_stable(self, tmp_path):
        first = diagnostics.render_report(*self._inputs(), str(tmp_path / "a"))
        second = diagnostics.render_report(*self._inputs(), str(tmp_path / "b"))
        for a, b in zip(first, second):
            with open(a, "rb") as fa, open(b, "rb") as fb:
                assert fa.read() == fb.read(), a

    def test_profile_dict_round_trip(self):
        profile = self._inputs()[0]["star"]
        again = diagnostics.profile_from_dict(diagnostics.profile_to_dict(profile))
        np.testing.assert_array_equal(again.mean_attention, profile.mean_attention)
        assert again.grid_side == 2
