"""Robustness reports, corruption sweeps, and training-curve files."""

import json

import numpy as np
import pytest
import torch

from advlab.attacks import ThreatModel
from advlab.errors import ConfigurationError
from advlab.evaluation import (
    CorruptionSpec,
    EvalReport,
    apply_corruption,
    default_suite,
    evaluate_corruptions,
    evaluate_robustness,
    load_curves,
    run_attack,
    track_training_curves,
)
from advlab.training import EpochMetrics, TrainState


def _report(model, gen, ds, **kw):
    suite = default_suite(eps=0.1, eta=0.05, iterations_pgd=3, iterations_jsa=3)
    return evaluate_robustness(model, gen, ds, suite, max_samples=64, **kw)


def test_report_structure(linear_classifier, manifold_data):
    ds, gen = manifold_data
    report = _report(linear_classifier, gen, ds, checkpoint_id="clf")
    assert set(report.rows) == {"pgd-3", "l2-pgd", "om-pgd", "jsa-3"}
    for row in report.rows.values():
        assert 0.0 <= row["accuracy"] <= 1.0
        assert row["n_samples"] == 64
    assert report.checkpoint_id == "clf"
    avg = np.mean([r["accuracy"] for r in report.rows.values()])
    assert report.average_attack_accuracy() == pytest.approx(float(avg))


def test_report_json_is_deterministic(linear_classifier, manifold_data):
    ds, gen = manifold_data
    a = _report(linear_classifier, gen, ds, seed=3)
    b = _report(linear_classifier, gen, ds, seed=3)
    # Timestamps differ, the machine-readable body must not.
    assert a.to_json() == b.to_json()
    body = json.loads(a.to_json())
    assert "timestamp" not in body


def test_report_table_contains_timestamp(linear_classifier, manifold_data):
    ds, gen = manifold_data
    report = _report(linear_classifier, gen, ds)
    table = report.format_table()
    assert "standard" in table
    assert report.timestamp in table


def test_empty_suite_rejected(linear_classifier, manifold_data):
    ds, gen = manifold_data
    with pytest.raises(ConfigurationError):
        evaluate_robustness(linear_classifier, gen, ds, [])
    with pytest.raises(ConfigurationError):
        evaluate_robustness(linear_classifier, gen, ds,
                            [("x", "cw", ThreatModel())])


def test_run_attack_unknown_kind(linear_classifier, manifold_data):
    ds, gen = manifold_data
    with pytest.raises(ConfigurationError):
        run_attack("cw", linear_classifier, gen, ds.images_t()[:2],
                   ds.labels_t()[:2], ThreatModel())


# -- corruptions -----------------------------------------------------------


def test_corruption_spec_validation():
    with pytest.raises(ConfigurationError):
        CorruptionSpec(kind="fog", severity=1)
    with pytest.raises(ConfigurationError):
        CorruptionSpec(kind="gaussian_noise", severity=6)


def test_corruption_severity_zero_is_identity(manifold_data):
    ds, _ = manifold_data
    images = ds.images[:8]
    for kind in ("gaussian_noise", "gaussian_blur", "contrast", "pixelate",
                 "salt_pepper"):
        out = apply_corruption(images, CorruptionSpec(kind=kind, severity=0))
        assert np.array_equal(out, images)
        assert out is not images


def test_corruptions_stay_in_range_and_are_seeded(manifold_data):
    ds, _ = manifold_data
    images = ds.images[:8]
    for kind in ("gaussian_noise", "gaussian_blur", "contrast", "pixelate",
                 "salt_pepper"):
        spec = CorruptionSpec(kind=kind, severity=4, seed=1)
        a = apply_corruption(images, spec)
        b = apply_corruption(images, spec)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert not np.array_equal(a, images)


def test_noise_severity_increases_distortion(manifold_data):
    ds, _ = manifold_data
    images = ds.images[:16]
    dist = [
        np.abs(apply_corruption(
            images, CorruptionSpec(kind="gaussian_noise", severity=s)
        ) - images).mean()
        for s in (1, 3, 5)
    ]
    assert dist[0] < dist[1] < dist[2]


def test_evaluate_corruptions(linear_classifier, manifold_data):
    ds, _ = manifold_data
    specs = [CorruptionSpec(kind="gaussian_noise", severity=s) for s in (0, 3)]
    report = evaluate_corruptions(linear_classifier, ds, specs, max_samples=64)
    assert set(report.rows) == {"gaussian_noise@0", "gaussian_noise@3"}
    assert report.rows["gaussian_noise@0"]["accuracy"] == pytest.approx(
        report.standard_accuracy
    )


# -- curves ----------------------------------------------------------------


def _state():
    return TrainState(
        epoch=2,
        metrics=[
            EpochMetrics(1, 0.69314718055994531, 0.5, 0.25),
            EpochMetrics(2, 0.512345678901234567, 0.75, 0.5),
        ],
    )


def test_curves_roundtrip_lossless(tmp_path):
    path = tmp_path / "curves.csv"
    track_training_curves(_state(), path)
    curves = load_curves(path)
    assert curves["epoch"].tolist() == [1.0, 2.0]
    assert curves["train_loss"][0] == 0.69314718055994531
    assert curves["robust_acc"].tolist() == [0.25, 0.5]


def test_curves_reject_empty_state(tmp_path):
    with pytest.raises(ConfigurationError):
        track_training_curves(TrainState(), tmp_path / "x.csv")


def test_load_curves_rejects_wrong_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ConfigurationError):
        load_curves(path)


def test_curve_files_are_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    track_training_curves(_state(), a)
    track_training_curves(_state(), b)
    assert a.read_bytes() == b.read_bytes()
