import gzip
import json

import numpy as np
import pytest

from supernet_search.analysis import cka_matrix, linear_cka, memory_account, memory_table
from supernet_search.benchmark import BenchmarkTable, enumerate_and_train, select_architectures
from supernet_search.config import BenchmarkConfig, OptimizerConfig
from supernet_search.conv_macro import ConvMacroConfig, channel_dim, conv_macro_spec, kernel_dim
from supernet_search.errors import (
    ConfigurationError,
    ConsistencyError,
    DimensionError,
    EvaluationError,
    FormatError,
    MixedSpaceError,
    PreconditionError,
    ResumeMismatchError,
    UndefinedSimilarityError,
    ValidationError,
)
from supernet_search.idx_loader import IMAGES_MAGIC, load_idx_images, read_idx, write_idx
from supernet_search.report import anytime_series, build_report, load_results, render, summary_table
from supernet_search.results import (
    RESULTS_FILE,
    TRAJECTORY_FILE,
    ResultRecord,
    append_jsonl,
    append_records,
)
from supernet_search.search_space import Architecture
from supernet_search.synthetic_data import (
    SyntheticTaskSpec,
    class_motifs,
    lm_dataset,
    ring_positions,
    synth_char_corpus,
    synth_image_dataset,
)
from supernet_search.training import split_dataset

SMALL_MACRO = dict(kernels=(3, 5), channels=((2, 4), (4, 8)), in_channels=1, num_classes=4)


def _record(run_id, epoch, val, method="drnas", space="conv-macro", test=None, seed=0):
    return ResultRecord(
        run_id=run_id,
        method=method,
        space=space,
        architecture="layer1/kernel=0",
        seed=seed,
        val_metric=val,
        test_metric=test,
        epoch=epoch,
        wall_seconds=0.1,
        param_count=100,
        supernet_mode="WE",
    )


# -- synthetic tasks -------------------------------------------------------------


def test_image_task_is_deterministic():
    spec = SyntheticTaskSpec(seed=3, train_size=16, val_size=8, test_size=8)
    first, second = synth_image_dataset(spec), synth_image_dataset(spec)
    np.testing.assert_array_equal(first.train.inputs, second.train.inputs)
    np.testing.assert_array_equal(first.test.labels, second.test.labels)
    other = synth_image_dataset(SyntheticTaskSpec(seed=4, train_size=16, val_size=8, test_size=8))
    assert not np.array_equal(first.train.inputs, other.train.inputs)


def test_image_task_shapes_and_balance():
    spec = SyntheticTaskSpec(num_classes=4, train_size=40, val_size=8, test_size=8)
    images = synth_image_dataset(spec)
    assert images.train.inputs.shape == (40, 1, 8, 8)
    assert np.bincount(images.train.labels).tolist() == [10, 10, 10, 10]
    assert images.motifs.shape == (4, 5, 5)


def test_motifs_are_distinct_rings():
    spec = SyntheticTaskSpec(num_classes=6)
    motifs = class_motifs(spec)
    assert len(ring_positions(5)) == 16
    assert motifs[:, 2, 2].tolist() == [0.0] * 6
    flat = {tuple(m.ravel()) for m in motifs}
    assert len(flat) == 6


def test_planted_optima():
    kernel_task = SyntheticTaskSpec(kind="planted_kernel", num_classes=4)
    assert kernel_task.planted_optimum().as_dict() == {
        kernel_dim(1): 1, channel_dim(1): 2, kernel_dim(2): 1, channel_dim(2): 2,
        kernel_dim(3): 1, channel_dim(3): 2, kernel_dim(4): 1, channel_dim(4): 2,
    }
    channel_task = SyntheticTaskSpec(kind="planted_channel", num_classes=10)
    assert channel_task.motif_extent == 3
    planted = channel_task.planted_optimum()
    assert planted[kernel_dim(1)] == 0
    assert planted[channel_dim(1)] == 1
    assert SyntheticTaskSpec(kind="char_grammar").planted_optimum() is None


def test_task_validation():
    with pytest.raises(ConfigurationError):
        SyntheticTaskSpec(kind="noise")
    with pytest.raises(ConfigurationError):
        SyntheticTaskSpec(motif_extent=4)
    with pytest.raises(ConfigurationError):
        SyntheticTaskSpec(num_classes=1)
    with pytest.raises(ConfigurationError):
        synth_image_dataset(SyntheticTaskSpec(kind="char_grammar"))
    with pytest.raises(ConfigurationError):
        SyntheticTaskSpec(motif_extent=5).planted_optimum(ConvMacroConfig(kernels=(3, 7)))


def test_char_corpus():
    corpus = synth_char_corpus(SyntheticTaskSpec(kind="char_grammar", sentences=200))
    assert {" ", ".", "\n"} <= set(corpus.vocabulary)
    assert corpus.decode(corpus.encode("the cat sees.")) == "the cat sees."
    assert corpus.bigram_perplexity < corpus.unigram_perplexity < len(corpus.vocabulary)
    again = synth_char_corpus(SyntheticTaskSpec(kind="char_grammar", sentences=200))
    np.testing.assert_array_equal(corpus.train, again.train)


def test_lm_windows_shift_by_one():
    stream = np.arange(11)
    dataset = lm_dataset(stream, context=4)
    assert len(dataset) == 2
    np.testing.assert_array_equal(dataset.inputs[1], [4, 5, 6, 7])
    np.testing.assert_array_equal(dataset.labels[1], [5, 6, 7, 8])
    with pytest.raises(ConfigurationError):
        lm_dataset(np.arange(4), context=4)


# -- IDX files ----------------------------------------------------------------------


@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_idx_files_load_as_scaled_images(tmp_path, rng, suffix):
    pixels = rng.integers(0, 256, size=(5, 4, 4), dtype=np.uint8)
    labels = np.array([0, 1, 2, 3, 9], dtype=np.uint8)
    images_path = write_idx(tmp_path / f"images{suffix}", pixels)
    labels_path = write_idx(tmp_path / f"labels{suffix}", labels)
    np.testing.assert_array_equal(read_idx(images_path, IMAGES_MAGIC), pixels)
    dataset = load_idx_images(images_path, labels_path)
    assert dataset.inputs.shape == (5, 1, 4, 4)
    np.testing.assert_allclose(dataset.inputs[:, 0], pixels / 255.0)
    assert dataset.labels.dtype == np.int64
    if suffix:
        with gzip.open(images_path, "rb") as fh:
            assert fh.read(4) == bytes([0, 0, 8, 3])


def test_idx_errors(tmp_path):
    images = write_idx(tmp_path / "images", np.zeros((3, 2, 2), dtype=np.uint8))
    labels = write_idx(tmp_path / "labels", np.array([0, 1, 2], dtype=np.uint8))
    with pytest.raises(FormatError):
        load_idx_images(labels, images)

    short = tmp_path / "short"
    short.write_bytes(images.read_bytes()[:-1])
    with pytest.raises(ConsistencyError):
        read_idx(short)

    few = write_idx(tmp_path / "few", np.array([0, 1], dtype=np.uint8))
    with pytest.raises(ConsistencyError):
        load_idx_images(images, few)
    with pytest.raises(ValidationError):
        load_idx_images(images, labels, num_classes=2)
    with pytest.raises(ValidationError):
        write_idx(tmp_path / "floats", np.zeros(3))


# -- representation similarity ----------------------------------------------------------


def test_cka_properties(rng):
    x = rng.standard_normal((30, 5))
    y = rng.standard_normal((30, 7))
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-12)
    assert linear_cka(x, 3.0 * x + 2.0) == pytest.approx(1.0, abs=1e-12)
    assert abs(linear_cka(x, y) - linear_cka(y, x)) < 1e-12
    assert 0.0 <= linear_cka(x, y) <= 1.0


def test_cka_of_orthogonal_features_is_zero():
    x = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    y = np.array([[1.0], [1.0], [-1.0], [-1.0]])
    assert linear_cka(x, y) < 1e-10


def test_cka_errors(rng):
    with pytest.raises(DimensionError):
        linear_cka(rng.standard_normal((4, 2)), rng.standard_normal((5, 2)))
    with pytest.raises(UndefinedSimilarityError):
        linear_cka(np.ones((4, 2)), rng.standard_normal((4, 2)))
    with pytest.raises(UndefinedSimilarityError):
        linear_cka(rng.standard_normal((1, 2)), rng.standard_normal((1, 2)))


def test_cka_matrix_labels(rng):
    features = {"a": rng.standard_normal((10, 3)), "b": rng.standard_normal((10, 4))}
    matrix = cka_matrix(features, features)
    assert list(matrix.index) == ["a", "b"]
    assert matrix.loc["a", "a"] == pytest.approx(1.0)


# -- memory accounting -----------------------------------------------------------------


def test_memory_account_small_macro():
    report = memory_account("conv-macro", "WS", **SMALL_MACRO)
    assert report.param_count == report.ws_param_count
    assert report.we_param_count == report.largest_param_count
    assert report.ws_we_ratio > 1.0
    assert report.param_bytes == report.param_count * 8
    assert report.activation_elements > 0
    with pytest.raises(ConfigurationError):
        memory_account("conv-macro", "XX")


def test_memory_table_covers_both_modes():
    table = memory_table(["conv-macro", "tiny-lm"], activations=False)
    assert len(table) == 4
    assert table["activation_elements"].isna().all()
    we = table[table["mode"] == "WE"]
    assert (we["param_count"] == we["largest_param_count"]).all()


# -- benchmark tables --------------------------------------------------------------------


@pytest.fixture
def bench_data(tiny_images):
    train, val = split_dataset(tiny_images, 0.5, seed=0)
    return train, val, None


def _bench_config(**overrides):
    values = dict(
        epochs=1,
        seeds=(0, 1),
        batch_size=8,
        weights=OptimizerConfig(kind="sgd", lr=0.05),
        progress=False,
    )
    values.update(overrides)
    return BenchmarkConfig(**values)


def _benchmark(out_dir, data, config, resume=False):
    return enumerate_and_train(
        "conv-macro", data, config, out_dir, options=SMALL_MACRO, resume=resume
    )


def test_benchmark_covers_every_pair(tmp_path, bench_data):
    table = _benchmark(tmp_path, bench_data, _bench_config())
    spec = conv_macro_spec(ConvMacroConfig(**SMALL_MACRO))
    assert len(table) == 32
    assert table.is_complete(spec, (0, 1))
    best, metric = table.best()
    assert best in table
    assert metric == pytest.approx(table.means().loc[best.to_text(), "val_mean"])
    assert table.means()["seeds"].eq(2).all()


def test_benchmark_resume_skips_finished_pairs(tmp_path, bench_data):
    config = _bench_config()
    _benchmark(tmp_path, bench_data, config)
    results = tmp_path / RESULTS_FILE
    lines = results.read_text().splitlines()
    results.write_text("\n".join(lines[:5]) + "\n")

    table = _benchmark(tmp_path, bench_data, config, resume=True)
    assert len(table) == 32
    assert results.read_text().splitlines()[:5] == lines[:5]


def test_benchmark_guards_its_directory(tmp_path, bench_data):
    _benchmark(tmp_path, bench_data, _bench_config(epochs=0))
    with pytest.raises(ConfigurationError):
        _benchmark(tmp_path, bench_data, _bench_config(epochs=0))
    with pytest.raises(ResumeMismatchError):
        _benchmark(tmp_path, bench_data, _bench_config(epochs=1), resume=True)


def test_benchmark_refuses_results_without_manifest(tmp_path, bench_data):
    append_records(tmp_path / RESULTS_FILE, [_record("x", 1, 0.5)])
    with pytest.raises(ResumeMismatchError):
        _benchmark(tmp_path, bench_data, _bench_config())


def test_select_architectures_respects_the_budget():
    spec = conv_macro_spec(ConvMacroConfig())
    small = conv_macro_spec(ConvMacroConfig(**SMALL_MACRO))
    assert len(select_architectures(small, _bench_config())) == 16
    with pytest.raises(ConfigurationError):
        select_architectures(spec, _bench_config(budget=100))
    sample = select_architectures(spec, _bench_config(budget=100, sample_fraction=0.01))
    assert len(sample) == 66
    assert len({a.to_text() for a in sample}) == 66
    assert sample == select_architectures(spec, _bench_config(budget=100, sample_fraction=0.01))
    with pytest.raises(ConfigurationError):
        select_architectures(spec, _bench_config(budget=100, sample_fraction=0.5))


def test_benchmark_table_from_records():
    rows = []
    for seed, value in ((0, 0.4), (1, 0.6)):
        record = _record(f"b{seed}", 5, value, method="benchmark", seed=seed)
        record.architecture = "x=0"
        rows.append(record)
    record = _record("b0", 5, 0.5, method="benchmark")
    record.architecture = "x=1"
    rows.append(record)
    table = BenchmarkTable.from_records(rows)
    assert table.space_id == "conv-macro"
    assert table.lookup(Architecture.parse("x=0")) == pytest.approx(0.5)
    assert table.best()[0] == Architecture.parse("x=0")
    with pytest.raises(EvaluationError):
        table.lookup(Architecture.parse("x=2"))
    with pytest.raises(ConsistencyError):
        BenchmarkTable.from_records(rows + [rows[0]])
    with pytest.raises(MixedSpaceError):
        BenchmarkTable.from_records(rows, space_id="toy-cell")


def test_incomplete_table_is_not_complete():
    spec = conv_macro_spec(ConvMacroConfig(**SMALL_MACRO))
    record = _record("b", 1, 0.5, method="benchmark")
    record.architecture = spec.largest().to_text()
    assert not BenchmarkTable.from_records([record]).is_complete(spec, (0,))


# -- reports ------------------------------------------------------------------------------


@pytest.fixture
def run_dirs(tmp_path):
    curves = {"run-a": [0.2, 0.5, 0.4], "run-b": [0.3, 0.3, 0.7]}
    dirs = []
    for run_id, values in curves.items():
        out = tmp_path / run_id
        records = [_record(run_id, e, v, test=v / 2) for e, v in enumerate(values, 1)]
        append_records(out / RESULTS_FILE, records)
        append_jsonl(out / TRAJECTORY_FILE, [
            {"run_id": run_id, "epoch": e, "alphas": {"layer1/kernel": [0.1 * e, -0.1 * e]}}
            for e in (1, 2, 3)
        ])
        dirs.append(out)
    return dirs


def test_summary_uses_final_epochs(run_dirs):
    summary = summary_table(load_results(run_dirs))
    row = summary.iloc[0]
    assert row["runs"] == 2
    assert row["val_mean"] == pytest.approx(0.55)
    assert row["val_std"] == pytest.approx(np.std([0.4, 0.7], ddof=1))
    assert row["test_mean"] == pytest.approx(0.275)


def test_anytime_curve_is_monotone(run_dirs):
    anytime = anytime_series(load_results(run_dirs))
    assert anytime["best_val_mean"].tolist() == pytest.approx([0.25, 0.4, 0.6])
    assert anytime["best_val_mean"].is_monotonic_increasing


def test_posthoc_summary_reports_the_best_evaluation(tmp_path):
    rows = []
    evaluations = [(0.4, None, "x=0"), (0.9, 0.88, "x=1"), (0.3, None, "x=2")]
    for epoch, (val, test, arch) in enumerate(evaluations, 1):
        record = _record("rs", epoch, val, method="random-search", test=test)
        record.architecture = arch
        rows.append(record)
    append_records(tmp_path / RESULTS_FILE, rows)
    row = summary_table(load_results([tmp_path])).iloc[0]
    assert row["method"] == "random-search"
    assert row["val_mean"] == pytest.approx(0.9)
    assert row["test_mean"] == pytest.approx(0.88)


def test_anytime_curve_holds_runs_that_stop_early(tmp_path):
    rows = [
        _record("long", e, v, method="evolution") for e, v in enumerate([0.2, 0.3, 0.35, 0.4], 1)
    ]
    rows += [_record("short", e, v, method="evolution") for e, v in enumerate([0.8, 0.9], 1)]
    append_records(tmp_path / RESULTS_FILE, rows)
    anytime = anytime_series(load_results([tmp_path]))
    assert anytime["best_val_mean"].tolist() == pytest.approx([0.5, 0.6, 0.625, 0.65])
    assert anytime["runs"].tolist() == [2, 2, 2, 2]
    assert anytime["best_val_mean"].is_monotonic_increasing


def test_report_refuses_mixed_spaces(tmp_path, run_dirs):
    other = tmp_path / "cell"
    append_records(other / RESULTS_FILE, [_record("run-c", 1, 0.5, space="toy-cell")])
    with pytest.raises(MixedSpaceError):
        load_results(run_dirs + [other])
    with pytest.raises(PreconditionError):
        load_results([])
    with pytest.raises(ConfigurationError):
        load_results([tmp_path / "missing"])


def test_render_formats(run_dirs):
    report = build_report(run_dirs)
    assert report.space == "conv-macro"
    assert len(report.trajectory) == 2 * 3 * 2
    text = render(report, "text")
    assert text.startswith("Space: conv-macro")
    assert "summary:" in text
    assert "trajectory (final alphas):" in text
    rows = [json.loads(line) for line in render(report, "records").splitlines()]
    assert {row["table"] for row in rows} == {"summary", "anytime", "trajectory"}
    with pytest.raises(ConfigurationError):
        render(report, "html")
