import json
import logging

import numpy as np
import pytest
from bitarray import bitarray

from cpri_compression import harness
from cpri_compression.bitstream import Bitstream, Scheme
from cpri_compression.datasets import read_frames
from cpri_compression.exceptions import ImproperlyConfigured
from cpri_compression.neural_core import THREADS_ENVIRONMENT_VARIABLE
from cpri_compression.reporting import read_report
from tests.conftest import small_options


@pytest.fixture()
def run_options(tmp_path, monkeypatch):
    monkeypatch.delenv(THREADS_ENVIRONMENT_VARIABLE, raising=False)
    return small_options(output_dir=str(tmp_path / "run"))


@pytest.fixture()
def datasets(run_options):
    return harness.generate_all_datasets(run_options)


@pytest.fixture()
def scalar_bundles(run_options, datasets):
    return harness.train_grid(run_options, ["scalar"])


def _stream(layer_index=None):
    scheme = Scheme.REFINEMENT if layer_index else Scheme.NEURAL
    return Bitstream(scheme, "downlink", 40, 8, (1, 1), bitarray(), (40, 40), layer_index)


def test_artifacts_are_laid_out_per_scenario(tmp_path, run_options):
    root = tmp_path / "run"

    assert harness.dataset_path(run_options, "train") == root / "data" / "downlink" / "train.cprf"
    assert harness.dataset_path(run_options, "test", "qam4") == root / "data" / "downlink-qam4" / "test.cprf"
    assert harness.bundle_path(run_options, "scalar", 4.0) == root / "bundles" / "downlink" / "scalar-4.npz"
    assert harness.bundle_path(run_options, "refinement") == root / "bundles" / "downlink" / "refinement.npz"
    assert harness.bundle_path(run_options, "neural", 500.0, "qam4") == (
        root / "bundles" / "downlink-qam4" / "neural-500.npz"
    )
    assert harness.report_path(run_options, "csv") == root / "reports" / "rd-downlink.csv"


def test_worker_count(run_options, monkeypatch):
    assert harness.worker_count(run_options) == 1

    monkeypatch.setenv(THREADS_ENVIRONMENT_VARIABLE, "3")
    assert harness.worker_count(run_options) == 3
    assert harness.worker_count(dict(run_options, deterministic=True)) == 1


def test_mismatch_scenarios_override_the_frame_or_channel(run_options, caplog):
    qam4 = harness.mismatch_options(run_options, "qam4")
    uplink = harness.mismatch_options(small_options("uplink"), "taps1")
    uplink_qam4 = harness.mismatch_options(small_options("uplink"), "qam4")

    assert qam4["frame"]["mod_order"] == 4
    assert run_options["frame"]["mod_order"] == 16
    assert uplink["channel"]["n_taps"] == 1
    assert uplink_qam4["frame"]["mod_order"] == 4
    assert uplink_qam4["channel"] == {"enabled": True, "n_taps": 7, "snr_db": 5.0}
    assert ("cpri-compression", logging.DEBUG, "Overriding setting frame.mod_order '16' with value '4'") in (
        caplog.record_tuples
    )


def test_unknown_mismatch_scenario(run_options):
    with pytest.raises(ImproperlyConfigured) as error:
        harness.mismatch_options(run_options, "qam8")

    assert str(error.value) == "Unknown mismatch scenario 'qam8', expected one of ['qam16', 'qam4']"


def test_datasets_include_mismatch_test_sets(run_options, datasets):
    assert sorted(datasets) == ["qam16/test", "qam4/test", "test", "train", "val"]
    assert harness.load_split(run_options, "train").shape == (24, 64)
    assert harness.load_split(harness.mismatch_options(run_options, "qam4"), "test", "qam4").shape == (8, 64)


def test_matched_datasets_cover_every_split(run_options):
    written = harness.generate_all_datasets(run_options, matched=True)

    assert {"qam4/train", "qam4/val", "qam4/test"} <= set(written)


def test_missing_datasets_are_reported(run_options):
    with pytest.raises(ImproperlyConfigured) as error:
        harness.load_split(run_options, "train")

    assert str(error.value) == f"Dataset {harness.dataset_path(run_options, 'train')} not found; run gen-dataset first"


def test_datasets_must_match_the_configuration(run_options, datasets):
    with pytest.raises(ImproperlyConfigured) as error:
        harness.load_split(small_options(output_dir=run_options["output_dir"], frame={"mod_order": 64}), "train")

    assert "configuration expects" in str(error.value)


def test_rate_grids(run_options):
    assert harness.rate_grid(run_options, "scalar") == [2.0, 3.0]
    assert harness.rate_grid(run_options, "neural") == [10.0, 100.0]
    assert harness.rate_grid(run_options, "refinement") == [None]
    with pytest.raises(ImproperlyConfigured):
        harness.rate_grid(run_options, "wavelet")


def test_training_saves_one_bundle_per_grid_point(run_options, scalar_bundles):
    assert scalar_bundles == [
        harness.bundle_path(run_options, "scalar", 2.0),
        harness.bundle_path(run_options, "scalar", 3.0),
    ]
    description = harness.describe_bundle(scalar_bundles[1])
    assert description["scheme"] == "scalar"
    assert description["metadata"]["q_bits"] == 3
    assert description["metadata"]["seed"] == run_options["seed"]
    assert description["total_parameters"] == 8


def test_sweep_writes_rows_for_matched_and_mismatched_data(run_options, scalar_bundles):
    rows = harness.sweep(run_options, ["scalar"])

    assert [(row.rate_param, row.tag) for row in rows] == [
        (2.0, ""),
        (3.0, ""),
        (2.0, "mismatched:qam4"),
        (3.0, "mismatched:qam4"),
        (2.0, "mismatched:qam16"),
        (3.0, "mismatched:qam16"),
    ]
    assert read_report(harness.report_path(run_options, "csv")) == rows
    assert harness.report_path(run_options, "svg").exists()


def test_sweep_jobs_pick_up_matched_bundles(run_options, scalar_bundles):
    harness.generate_dataset(harness.mismatch_options(run_options, "qam4"), tag="qam4")
    harness.train_grid(harness.mismatch_options(run_options, "qam4"), ["scalar"], "qam4")

    tags = [job.row_tag for job in harness.sweep_jobs(run_options, ["scalar"])]

    assert tags.count("matched:qam4") == 2
    assert tags.count("matched:qam16") == 0


def test_missing_bundles_are_skipped(run_options, datasets, caplog):
    assert harness.evaluate_job(harness.SweepJob(run_options, "scalar", 2.0)) == []
    assert caplog.record_tuples[-1][1] == logging.WARNING


def test_files_encode_and_decode(tmp_path, run_options, scalar_bundles):
    source = harness.dataset_path(run_options, "test")
    streams = tmp_path / "out" / "test.cprz"

    assert harness.encode_file(run_options, scalar_bundles[1], source, streams) == 8
    decoded = harness.decode_file(run_options, scalar_bundles[1], streams, tmp_path / "out" / "decoded.cprf")

    frames, _ = read_frames(tmp_path / "out" / "decoded.cprf")
    assert decoded.shape == (8, 72)
    np.testing.assert_allclose(frames, decoded, atol=1e-5 * np.abs(decoded).max())


def test_bundle_evaluation_on_mismatched_data(run_options, scalar_bundles):
    row = harness.evaluate_bundle(run_options, scalar_bundles[0], tag="qam16")

    assert row.scheme == "scalar"
    assert row.tag == "mismatched:qam16"
    assert row.bits_per_element == 2.0


def test_streams_group_into_frames():
    layered = [_stream(1), _stream(2), _stream(1), _stream(1), _stream(2)]
    single = [_stream(), _stream()]

    assert [len(group) for group in harness.group_streams(layered)] == [2, 1, 2]
    assert [len(group) for group in harness.group_streams(single)] == [1, 1]


def test_covariance_check_writes_a_summary(run_options):
    report = harness.covcheck(run_options, frames=200)

    summary = json.loads((harness.report_path(run_options, "csv").parent / "covcheck-downlink.json").read_text())
    assert summary["frames"] == report.frames == 200
    assert summary["k_star"] == 4
    assert summary["rel_frobenius_error"] == report.rel_frobenius_error


def test_covariance_check_is_downlink_only(tmp_path):
    with pytest.raises(ImproperlyConfigured):
        harness.covcheck(small_options("uplink", output_dir=str(tmp_path)), frames=10)
