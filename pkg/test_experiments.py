import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from threadpoolctl import threadpool_info

from core.data_synth import generate_dataset, generate_utterance
from core.decoding import corpus_wer
from core.distillation import KdConfig
from core.errors import (
    ChecksumMismatchError,
    CheckpointConfigMismatchError,
    CheckpointError,
    CompressionInfeasibleError,
    ConfigurationError,
    FormatVersionError,
    TrainingDivergedError,
    TruncatedCheckpointError,
    UsageError,
)
from core.model import CascadeConfig, DecoderConfig, build_model, estimate_params, parameter_checksum
from core.transducer_loss import count_alignments
from experiments import cli, latency
from experiments.checkpoint import (
    FORMAT_VERSION,
    decode_container,
    encode_container,
    load_checkpoint,
    load_features,
    save_checkpoint,
    save_features,
)
from experiments.compression import (
    TOLERANCE,
    cell_size_sweep,
    compress_config,
    embedding_size_sweep,
    layer_depth_sweep,
)
from experiments.config import (
    PRESETS,
    apply_overrides,
    clean_env_value,
    desk_student_config,
    desk_teacher_config,
    flatten_config,
    load_config,
    paper_teacher_config,
    parse_set_arguments,
    tar_decoder,
    toy_config,
    toy_student_config,
    write_config_file,
)
from experiments.datasets import generate_splits, load_dataset, read_manifest, write_dataset
from experiments.evaluation import evaluate
from experiments.latency import benchmark_latency, compare_latency, median_absolute_deviation
from experiments.reports import format_table, read_jsonl, summary_row, write_jsonl
from experiments.results_db import (
    create_results_engine,
    export_table,
    get_latest_runs,
    get_loss_curve,
    get_run_history,
    record_evaluation,
    record_latency,
    record_run,
)
from experiments.training import (
    Adam,
    Trainer,
    distill_train,
    l2_penalty,
    lr_at_step,
    train,
    uniform_loss_estimate,
)

ROOT = os.path.dirname(os.path.abspath(__file__))

TINY_SETS = [
    "TASK__VOCAB_SIZE=6", "TASK__FEATURE_DIM=8", "TASK__FRAMES_PER_TOKEN=2",
    "TASK__TRAIN_UTTERANCES=4", "TASK__EVAL_UTTERANCES=2", "TASK__MIN_TOKENS=2", "TASK__MAX_TOKENS=4",
    "TASK__FREQ_WIDTH=2",
    "CASCADE__CAUSAL_LAYERS=1", "CASCADE__NONCAUSAL_LAYERS=1", "CASCADE__MODEL_DIM=8", "CASCADE__NUM_HEADS=2",
    "CASCADE__CONV_KERNEL=3", "CASCADE__SUBSAMPLE_FACTOR=2", "CASCADE__MAX_REL_POSITION=4",
    "DECODER__EMBEDDING_DIM=8", "DECODER__HIDDEN_DIM=8", "DECODER__NUM_LAYERS=1", "DECODER__PRED_DIM=8",
    "DECODER__JOINT_DIM=8",
    "TRAIN__STEPS=2", "TRAIN__BATCH_SIZE=2", "TRAIN__WARMUP_STEPS=1", "TRAIN__LOG_EVERY=1",
]


def tiny_config(**changes):
    return replace(apply_overrides(toy_config(), parse_set_arguments(TINY_SETS)), **changes)


def tiny_dataset(config=None, count=4, seed=0):
    config = config or tiny_config()
    return generate_dataset(config.task.synth_spec(), count, seed, min_tokens=2, max_tokens=4)


# Configuration


def test_clean_env_value():
    assert clean_env_value(' "runs"  # output ') == "runs"
    assert clean_env_value("'0.5'") == "0.5"
    assert clean_env_value(None) is None


def test_overrides_coerce_types():
    config = apply_overrides(toy_config(), {
        "CASCADE__MODEL_DIM": "48", "DECODER__TIED": "false", "TASK__NOISE_STD": "0.2",
        "TRAIN__LEARNING_RATE": "1e-3", "TRAIN__TEACHER_CHECKPOINT": "none",
    })
    assert config.cascade.model_dim == 48
    assert config.decoder.tied is False
    assert config.task.noise_std == pytest.approx(0.2)
    assert config.learning_rate == pytest.approx(1e-3)
    assert config.teacher_checkpoint is None


def test_kd_keys_switch_distillation():
    config = apply_overrides(toy_config(), {"KD__ALPHA": "0.1"})
    assert config.kd == KdConfig(alpha=0.1)
    assert apply_overrides(config, {"KD__ENABLED": "false"}).kd is None
    assert apply_overrides(toy_config(), {"KD__ENABLED": "true"}).kd == KdConfig()


def test_overrides_reject_unknown_or_bad_values():
    for bad in ({"CASCADE__WIDTH": "3"}, {"MODEL__DIM": "3"}, {"MODELDIM": "3"},
                {"CASCADE__MODEL_DIM": "wide"}, {"DECODER__TIED": "maybe"}):
        with pytest.raises(ConfigurationError):
            apply_overrides(toy_config(), bad)
    with pytest.raises(ConfigurationError):
        parse_set_arguments(["CASCADE__MODEL_DIM"])


def test_validation_errors():
    with pytest.raises(ConfigurationError):
        replace(toy_config(), kd=KdConfig()).validate()
    with pytest.raises(ConfigurationError):
        replace(toy_config(), causal_weight=1.5).validate()
    with pytest.raises(ConfigurationError):
        replace(toy_config(), lr_decay="cosine").validate()
    with pytest.raises(ConfigurationError):
        load_config(preset="huge")
    with pytest.raises(FileNotFoundError):
        load_config("does-not-exist.env")


def test_config_file_round_trip(tmp_path):
    config = replace(tiny_config(seed=7), kd=KdConfig(alpha=0.05, mode="full"), teacher_checkpoint="t.ckpt")
    path = write_config_file(config, str(tmp_path / "run.env"))
    assert load_config(path) == config
    assert flatten_config(config)["KD__ENABLED"] == "true"
    assert load_config(path, seed=3).seed == 3
    assert load_config(path, overrides={"KD__ENABLED": "false"}).kd is None


def test_dict_round_trip():
    config = replace(toy_config(), kd=KdConfig(), teacher_checkpoint="t.ckpt")
    assert type(config).from_dict(config.to_dict()) == config


def test_shipped_config_files():
    configs = os.path.join(ROOT, "configs")
    assert load_config(os.path.join(configs, "toy.env")) == toy_config()
    assert load_config(os.path.join(configs, "desk_teacher.env"), preset="desk_teacher") == desk_teacher_config()
    paper = load_config(os.path.join(configs, "paper_teacher.env"))
    assert paper.model_config == paper_teacher_config().model_config
    student = load_config(os.path.join(configs, "desk_student_tar.env"), preset="desk_student",
                          overrides={"TRAIN__TEACHER_CHECKPOINT": "teacher.ckpt"})
    assert student.decoder.kind == "tar" and student.decoder.tied
    assert student.kd == KdConfig(alpha=0.02, temperature=1.0, mode="efficient", branches="both")
    assert student.cascade == desk_student_config().cascade


def test_every_preset_builds_a_valid_model_config():
    for name, factory in PRESETS.items():
        factory().model_config.validate()


# Compression


def test_zero_compression_returns_the_baseline():
    base = toy_config()
    config, spec = compress_config(base, 0)
    assert config is base
    assert spec.realized_factor == 0.0


def test_half_size_toy_student():
    base = toy_config()
    config, spec = compress_config(base, 50, decoder=tar_decoder(32))
    assert spec.relative_error <= TOLERANCE
    assert (spec.model_dim, spec.embedding_dim, spec.layers_reduced) == (24, 24, False)
    assert config.decoder.kind == "tar" and config.decoder.joint_dim == 24
    assert estimate_params(config.model_config)["total"] == spec.realized_total
    assert toy_student_config().cascade == config.cascade
    assert toy_student_config().kd == KdConfig()


def test_half_size_paper_model_keeps_the_lstm_decoder():
    base = paper_teacher_config()
    config, spec = compress_config(base, 50)
    assert spec.relative_error <= TOLERANCE
    assert 150 <= spec.model_dim <= 172
    assert spec.causal_layers == 16
    assert config.decoder == base.decoder
    assert spec.to_dict()["realized_factor"] == pytest.approx(50, abs=5)


def test_infeasible_compression_reports_closest():
    with pytest.raises(CompressionInfeasibleError) as excinfo:
        compress_config(toy_config(), 89, allow_layer_reduction=False)
    assert excinfo.value.closest["total"] > excinfo.value.target


def test_compression_factor_bounds():
    for factor in (-1, 90, 95):
        with pytest.raises(UsageError):
            compress_config(toy_config(), factor)


def test_size_sweeps():
    base = toy_config().model_config
    cells = cell_size_sweep(base, [32, 24, 16])
    assert list(cells.columns) == ["model_dim", "total_params", "compression_percent"]
    assert cells["compression_percent"].iloc[0] == 0.0
    assert cells["total_params"].is_monotonic_decreasing
    depths = layer_depth_sweep(base, [2, 1])
    assert depths["total_params"].iloc[0] > depths["total_params"].iloc[1]
    embeddings = embedding_size_sweep(base, [32, 16])
    assert list(embeddings.columns) == ["embedding_dim", "decoder_params", "reduction_percent"]
    assert embeddings["reduction_percent"].iloc[1] > embeddings["reduction_percent"].iloc[0] > 0


# Checkpoints


def test_checkpoint_round_trip(tmp_path):
    config = tiny_config()
    model = build_model(config.model_config, seed=5)
    path = save_checkpoint(model, config, str(tmp_path / "model.ckpt"))
    loaded, loaded_config = load_checkpoint(path, expected_config=config)
    assert loaded_config == config
    assert parameter_checksum(loaded) == parameter_checksum(model)
    assert loaded.joint.output_weight.dtype == np.float32


def test_tied_checkpoint_keeps_shared_storage(tmp_path):
    config = tiny_config(decoder=tar_decoder(8))
    model = build_model(config.model_config, seed=1)
    loaded, _ = load_checkpoint(save_checkpoint(model, config, str(tmp_path / "tar.ckpt")))
    assert loaded.joint.output_weight is loaded.predictor.embedding
    assert parameter_checksum(loaded) == parameter_checksum(model)


@pytest.mark.parametrize("decoder", [None, tar_decoder(8)], ids=["lstm", "tied_tar"])
def test_checkpoint_resave_is_byte_identical(tmp_path, decoder):
    config = tiny_config(decoder=decoder) if decoder else tiny_config()
    first = save_checkpoint(build_model(config.model_config, seed=3), config, str(tmp_path / "first.ckpt"))
    loaded, loaded_config = load_checkpoint(first)
    second = save_checkpoint(loaded, loaded_config, str(tmp_path / "second.ckpt"))
    with open(first, "rb") as a, open(second, "rb") as b:
        assert a.read() == b.read()


def test_checkpoint_corruption_is_detected(tmp_path):
    config = tiny_config()
    path = save_checkpoint(build_model(config.model_config), config, str(tmp_path / "model.ckpt"))
    with open(path, "rb") as handle:
        data = handle.read()

    flipped = bytearray(data)
    flipped[len(data) - 37] ^= 0xFF
    with pytest.raises(ChecksumMismatchError):
        decode_container(bytes(flipped))
    with pytest.raises(TruncatedCheckpointError):
        decode_container(data[:-10])
    with pytest.raises(ChecksumMismatchError):
        decode_container(data + b"\x00")
    versioned = bytearray(data)
    versioned[4:6] = (FORMAT_VERSION + 1).to_bytes(2, "little")
    with pytest.raises(FormatVersionError):
        decode_container(bytes(versioned))
    with pytest.raises(FormatVersionError):
        decode_container(b"XXXX" + data[4:])


def test_every_damaged_byte_is_a_checksum_mismatch():
    data = encode_container({"kind": "features"}, [("x", np.arange(6, dtype=np.float32).reshape(2, 3))])
    for index in range(6, len(data)):
        damaged = bytearray(data)
        damaged[index] ^= 0xFF
        with pytest.raises(ChecksumMismatchError):
            decode_container(bytes(damaged))


def test_every_short_container_is_truncated():
    data = encode_container({"kind": "features"}, [("x", np.arange(6, dtype=np.float32).reshape(2, 3))])
    for length in range(4, len(data)):
        with pytest.raises(TruncatedCheckpointError):
            decode_container(data[:length])


def test_checkpoint_config_mismatches(tmp_path):
    config = tiny_config()
    model = build_model(config.model_config)
    other = tiny_config(decoder=tar_decoder(8))
    with pytest.raises(CheckpointConfigMismatchError):
        save_checkpoint(model, other, str(tmp_path / "bad.ckpt"))
    path = save_checkpoint(model, config, str(tmp_path / "model.ckpt"))
    with pytest.raises(CheckpointConfigMismatchError):
        load_checkpoint(path, expected_config=other)


def test_container_rejects_unsupported_dtypes():
    with pytest.raises(CheckpointError):
        encode_container({}, [("x", np.zeros(2, dtype=np.int16))])


def test_feature_files(tmp_path):
    utt = generate_utterance(tiny_config().task.synth_spec(), 3, seed=2)
    path = save_features(utt, str(tmp_path / "utt.feat"))
    loaded = load_features(path)
    assert loaded.utt_id == utt.utt_id and loaded.tokens == utt.tokens
    np.testing.assert_array_equal(loaded.features, utt.features)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    config = tiny_config()
    ckpt = save_checkpoint(build_model(config.model_config), config, str(tmp_path / "m.ckpt"))
    with pytest.raises(CheckpointError):
        load_features(ckpt)


# Datasets


def test_generate_and_load_splits(tmp_path):
    config = tiny_config()
    manifests = generate_splits(config.task, seed=4, output_dir=str(tmp_path))
    assert set(manifests) == {"train", "eval"}
    train_set = load_dataset(manifests["train"])
    eval_set = load_dataset(manifests["eval"])
    assert [u.utt_id for u in train_set] == [f"train-{i:05d}" for i in range(4)]
    assert [u.utt_id for u in eval_set] == ["eval-00000", "eval-00001"]
    expected = generate_dataset(config.task.synth_spec(), 4, 4, 2, 4, prefix="train")
    for a, b in zip(train_set, expected):
        assert a.tokens == b.tokens
        np.testing.assert_array_equal(a.features, b.features)
    df = read_manifest(manifests["train"])
    assert df["num_frames"].tolist() == [u.num_frames for u in train_set]


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(str(tmp_path / "missing.csv"))
    with pytest.raises(UsageError):
        write_dataset([], str(tmp_path))
    manifest = write_dataset(tiny_dataset(count=2), str(tmp_path), "small")
    df = pd.read_csv(manifest, dtype=str)
    df.loc[0, "tokens"] = "1 1 1 1 1"
    df.to_csv(manifest, index=False)
    with pytest.raises(UsageError):
        load_dataset(manifest)


# Training


def test_learning_rate_schedule():
    config = replace(toy_config(), learning_rate=1e-3, warmup_steps=10)
    assert lr_at_step(0, config) == pytest.approx(1e-4)
    assert lr_at_step(9, config) == pytest.approx(1e-3)
    assert lr_at_step(39, config) == pytest.approx(5e-4)
    assert lr_at_step(39, replace(config, lr_decay="none")) == pytest.approx(1e-3)
    assert lr_at_step(0, replace(config, warmup_steps=0)) == pytest.approx(1e-3)


def test_adam_first_step_moves_by_learning_rate():
    from core.tensor import Parameter

    p, untouched = Parameter(np.array([1.0])), Parameter(np.array([5.0]))
    p.grad = np.array([2.0])
    optimizer = Adam([p, untouched])
    optimizer.step(0.1)
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)
    assert untouched.data[0] == 5.0


def test_l2_and_uniform_estimates():
    from core.tensor import Parameter

    assert l2_penalty([Parameter(np.array([1.0, 2.0]))], 0.5) == pytest.approx(2.5)
    assert uniform_loss_estimate(2, 1, 2) == pytest.approx(np.log(4.0))
    assert uniform_loss_estimate(3, 2, 4) == pytest.approx(5 * np.log(4.0) - np.log(count_alignments(3, 2)))


def test_trainer_argument_errors():
    config = tiny_config()
    with pytest.raises(UsageError):
        Trainer(config, [])
    kd_config = replace(config, kd=KdConfig(), teacher_checkpoint="t.ckpt")
    with pytest.raises(ConfigurationError):
        Trainer(kd_config, tiny_dataset())
    with pytest.raises(ConfigurationError):
        train(kd_config, tiny_dataset())
    with pytest.raises(ConfigurationError):
        distill_train(build_model(config.model_config), config, tiny_dataset())


def test_batches_cover_each_epoch():
    trainer = Trainer(tiny_config(), tiny_dataset())
    first_epoch = trainer.batch_indices(0) + trainer.batch_indices(1)
    assert sorted(first_epoch) == [0, 1, 2, 3]
    assert len(trainer.batch_indices(2)) == 2


def test_training_is_deterministic():
    config = tiny_config()
    first = train(config, tiny_dataset())
    second = train(config, tiny_dataset())
    assert first.metrics == second.metrics
    assert parameter_checksum(first.model) == parameter_checksum(second.model)
    assert [m["step"] for m in first.metrics] == [0, 1]
    assert all(np.isfinite(m["loss"]) for m in first.metrics)


def test_training_updates_parameters():
    config = tiny_config()
    before = parameter_checksum(build_model(config.model_config, seed=config.seed))
    result = train(config, tiny_dataset())
    assert parameter_checksum(result.model) != before


def test_train_writes_run_outputs(tmp_path):
    config = tiny_config()
    result = train(config, tiny_dataset(), output_dir=str(tmp_path))
    assert os.path.isfile(tmp_path / "metrics.jsonl")
    assert os.path.isfile(tmp_path / "config.env")
    metrics = read_jsonl(result.metrics_path)
    assert list(metrics["step"]) == [0, 1]
    loaded, _ = load_checkpoint(result.checkpoint_path)
    assert parameter_checksum(loaded) == parameter_checksum(result.model)
    assert load_config(str(tmp_path / "config.env")) == config


def test_initial_loss_is_near_the_uniform_model():
    config = toy_config()
    dataset = generate_dataset(config.task.synth_spec(), 8, seed=0)
    record = Trainer(config, dataset).train_step(0)
    assert abs(record["rnnt_loss"] - record["uniform_loss"]) / record["uniform_loss"] <= 0.2


def test_non_finite_loss_raises_diverged():
    trainer = Trainer(tiny_config(), tiny_dataset())
    trainer.model.in_proj.weight.data[:] = np.nan
    with pytest.raises(TrainingDivergedError) as excinfo:
        trainer.train_step(0)
    assert excinfo.value.step == 0


def test_student_identical_to_teacher_has_zero_distillation_loss():
    from core import tensor as T

    base = tiny_config()
    config = replace(base, cascade=replace(base.cascade, dropout=0.0), kd=KdConfig(),
                     teacher_checkpoint="unused")
    teacher = build_model(config.model_config, seed=config.seed)
    trainer = Trainer(config, tiny_dataset(config), teacher=teacher)
    with T.Tape() as tape:
        total, rnnt, kd = trainer.utterance_losses(trainer.dataset[0], 0, tape)
        assert kd.item() < 1e-6
        assert total.item() == pytest.approx((1 - config.kd.alpha) * rnnt.item() + config.kd.alpha * kd.item())


@pytest.mark.parametrize("kd", [KdConfig(mode="full", branches="causal"),
                                KdConfig(mode="efficient", branches="noncausal", temperature=2.0)])
def test_distillation_leaves_teacher_untouched(tmp_path, kd):
    teacher_config = tiny_config()
    teacher = train(teacher_config, tiny_dataset(), output_dir=str(tmp_path / "teacher"))
    before = parameter_checksum(teacher.model)
    student_config = replace(tiny_config(decoder=tar_decoder(8)), kd=kd)
    result = distill_train(teacher.checkpoint_path, student_config, tiny_dataset(),
                           output_dir=str(tmp_path / "student"))
    assert result.teacher_checksum == before
    assert all(m["kd_loss"] > 0 for m in result.metrics)
    _, stored = load_checkpoint(result.checkpoint_path)
    assert stored.teacher_checkpoint == teacher.checkpoint_path


def test_distillation_requires_compatible_teacher():
    teacher = build_model(tiny_config().model_config)
    student = replace(tiny_config(), task=replace(tiny_config().task, vocab_size=7), kd=KdConfig(),
                      teacher_checkpoint="t.ckpt")
    with pytest.raises(ConfigurationError):
        distill_train(teacher, student, tiny_dataset())


# Evaluation and latency


def test_evaluation_report(tmp_path):
    config = tiny_config()
    model = build_model(config.model_config)
    dataset = tiny_dataset(count=3)
    path = str(tmp_path / "eval.jsonl")
    report = evaluate(model, dataset, "streaming", report_path=path)
    assert report.mode == "streaming" and report.beam == 1
    assert len(report.utterances) == 3
    pairs = [(u.tokens, tuple(int(k) for k in r["hypothesis"].split())) for u, r in zip(dataset, report.utterances)]
    assert report.corpus == corpus_wer(pairs)
    records = read_jsonl(path)
    assert len(records) == 4
    assert records["record"].iloc[-1] == "corpus"
    assert records["wer"].iloc[-1] == pytest.approx(report.corpus.rate)


@pytest.mark.parametrize("mode", ["streaming", "nonstreaming"])
def test_untrained_model_scores_near_total_error(mode):
    config = toy_config()
    task = config.task
    eval_set = generate_dataset(task.synth_spec(), 16, seed=11, min_tokens=task.min_tokens, max_tokens=task.max_tokens)
    report = evaluate(build_model(config.model_config, seed=config.seed), eval_set, mode)
    assert report.corpus.rate >= 0.8


def test_evaluation_from_checkpoint_and_chunked(tmp_path):
    config = tiny_config()
    model = build_model(config.model_config)
    path = save_checkpoint(model, config, str(tmp_path / "m.ckpt"))
    dataset = tiny_dataset(count=2)
    from_file = evaluate(path, dataset, "streaming")
    assert from_file.checkpoint == path
    chunked = evaluate(model, dataset, "streaming", chunk_frames=4)
    assert [r["hypothesis"] for r in chunked.utterances] == [r["hypothesis"] for r in from_file.utterances]
    beam = evaluate(model, dataset, "nonstreaming", beam=2)
    assert beam.summary()["beam"] == 2


def test_evaluation_argument_errors():
    model = build_model(tiny_config().model_config)
    with pytest.raises(UsageError):
        evaluate(model, [], "streaming")
    with pytest.raises(UsageError):
        evaluate(model, tiny_dataset(count=1), "streaming", beam=0)
    with pytest.raises(ValueError):
        evaluate(model, tiny_dataset(count=1), "offline")


def test_latency_report(tmp_path):
    model = build_model(tiny_config().model_config)
    dataset = tiny_dataset(count=2)
    path = str(tmp_path / "latency.jsonl")
    report = benchmark_latency(model, dataset, repetitions=3, beam=2, warmup=0, report_path=path)
    summary = report.summary
    assert summary["num_utterances"] == 2 and summary["repetitions"] == 3
    assert summary["first_pass_ms"] > 0 and summary["second_pass_ms"] > 0
    assert summary["xrt_second"] > 0
    assert "cpu_count" in summary["machine"]
    assert summary["machine"]["blas_threads"] == 1
    assert summary["beam"] == summary["beam_passes"] == 2
    records = read_jsonl(path)
    assert list(records["record"]) == ["utterance", "utterance", "corpus"]
    assert records["beam_passes"].iloc[-1] == 2
    comparison = compare_latency(report, report)
    assert comparison["second_pass_ratio"] == pytest.approx(1.0)
    assert comparison["reference_reduction_percent"] == 30.0


def test_latency_timing_runs_with_single_threaded_blas(monkeypatch):
    seen = []
    timed = latency._time_passes

    def recording(model, features, beam):
        seen.extend(pool["num_threads"] for pool in threadpool_info())
        return timed(model, features, beam)

    monkeypatch.setattr(latency, "_time_passes", recording)
    benchmark_latency(build_model(tiny_config().model_config), tiny_dataset(count=1), repetitions=3, warmup=0)
    assert all(n == 1 for n in seen)


def test_latency_argument_errors():
    model = build_model(tiny_config().model_config)
    with pytest.raises(UsageError):
        benchmark_latency(model, [], repetitions=3)
    with pytest.raises(UsageError):
        benchmark_latency(model, tiny_dataset(count=1), repetitions=2)


def test_median_absolute_deviation():
    assert median_absolute_deviation([1, 2, 3, 4, 100]) == 1


# Results database and reports


def test_results_database(tmp_path):
    engine = create_results_engine(str(tmp_path / "db" / "results.db"))
    assert get_latest_runs(engine).empty
    assert get_run_history(engine).empty
    config = tiny_config()
    metrics = [{"step": s, "loss": 10.0 - s, "rnnt_loss": 10.0 - s, "kd_loss": 0.0, "l2_loss": 0.0,
                "learning_rate": 1e-3, "uniform_loss": 12.0} for s in range(5)]
    record_run(engine, "run-a", "train", config, metrics, "a.ckpt", 1234)
    record_run(engine, "run-b", "distill", replace(config, kd=KdConfig(), teacher_checkpoint="a.ckpt"),
               metrics[:2], "b.ckpt", 567)

    latest = get_latest_runs(engine)
    final = dict(zip(latest["run_id"], latest["final_step"]))
    assert final == {"run-a": 4, "run-b": 1}

    curve = get_loss_curve(engine, "run-a", window_size=2)
    assert list(curve["loss"]) == [10.0, 9.0, 8.0, 7.0, 6.0]
    assert list(curve["rolling_loss"]) == [10.0, 9.5, 8.5, 7.5, 6.5]

    record_evaluation(engine, {"record": "corpus", "checkpoint": "a.ckpt", "mode": "streaming", "beam": 1,
                               "wer": 0.25})
    record_evaluation(engine, {"record": "corpus", "checkpoint": "a.ckpt", "mode": "nonstreaming", "beam": 1,
                               "wer": 0.125})
    history = get_run_history(engine)
    best = dict(zip(history["run_id"], history["best_wer"]))
    assert best["run-a"] == pytest.approx(0.125)
    assert pd.isna(best["run-b"])
    assert list(get_run_history(engine, kind="distill")["run_id"]) == ["run-b"]

    record_latency(engine, {"checkpoint": "a.ckpt", "second_pass_ms": 3.5, "machine": {"cpu_count": 4}})
    csv_path = str(tmp_path / "latency.csv")
    assert "Exported 1 rows" in export_table(engine, "latency", csv_path)
    assert pd.read_csv(csv_path)["second_pass_ms"].iloc[0] == 3.5
    xlsx_path = str(tmp_path / "runs.xlsx")
    export_table(engine, "runs", xlsx_path)
    assert len(pd.read_excel(xlsx_path)) == 2
    with pytest.raises(ValueError):
        export_table(engine, "no_such_table", csv_path)


def test_export_of_missing_table(tmp_path):
    engine = create_results_engine(str(tmp_path / "empty.db"))
    with pytest.raises(ValueError):
        export_table(engine, "latency", str(tmp_path / "x.csv"))


def test_jsonl_reports(tmp_path):
    path = write_jsonl([{"a": 1, "b": 2.5}, {"a": 2}], str(tmp_path / "out" / "r.jsonl"), columns=["a", "b"])
    df = read_jsonl(path)
    assert list(df["a"]) == [1, 2]
    assert pd.isna(df["b"].iloc[1])
    empty = write_jsonl([], str(tmp_path / "empty.jsonl"))
    assert read_jsonl(empty).empty


def test_summary_table():
    row = summary_row("half", 20_000_000, 40_000_000, 0.05, 0.0712)
    assert row == {"model": "half", "params_M": 20.0, "compression_%": 50.0, "WER_NS_%": 5.0, "WER_S_%": 7.12}
    table = format_table([row])
    assert "compression_%" in table and "+--" in table


# Command line


def test_parser_defaults():
    args = cli.build_parser().parse_args(["eval", "--checkpoint", "m.ckpt"])
    assert args.mode == "both" and args.beam == 1
    args = cli.build_parser().parse_args(["train", "--set", "TRAIN__STEPS=3", "--set", "TRAIN__SEED=1"])
    assert args.preset == "toy" and args.set == ["TRAIN__STEPS=3", "TRAIN__SEED=1"]
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["train", "--preset", "giant"])


def test_cli_parameter_sweep(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    cli.main(["params", "--preset", "paper_teacher", "--sweep", "embedding", "--values", "768", "384", "192"])
    out = capsys.readouterr().out
    assert "77.41" in out and "90.83" in out and "95.94" in out


def test_cli_compress_config_writes_student(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    path = str(tmp_path / "student.env")
    cli.main(["compress-config", "--preset", "toy", "--factor", "50", "--decoder", "tar", "--kd", "--output", path])
    assert "Wrote" in capsys.readouterr().out
    student = load_config(path, overrides={"TRAIN__TEACHER_CHECKPOINT": "t.ckpt"})
    assert student.cascade.model_dim == 24
    assert student.decoder.kind == "tar" and student.kd == KdConfig()


def test_cli_reports_failures_with_exit_status(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["train", "--train-manifest", str(tmp_path / "missing.csv"), "--no-db"])
    assert excinfo.value.code == 1
    assert "❌" in capsys.readouterr().out
    with pytest.raises(SystemExit):
        cli.main(["params", "--set", "CASCADE__WIDTH=3"])


def test_cli_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    db = str(tmp_path / "results.db")
    data = str(tmp_path / "data")
    sets = [arg for pair in TINY_SETS for arg in ("--set", pair)]

    cli.main(["data-gen", *sets, "--output-dir", data])
    train_manifest, eval_manifest = os.path.join(data, "train.csv"), os.path.join(data, "eval.csv")
    assert os.path.isfile(train_manifest) and os.path.isfile(eval_manifest)

    cli.main(["train", *sets, "--train-manifest", train_manifest, "--output-dir", str(tmp_path / "teacher"),
              "--db", db])
    teacher = str(tmp_path / "teacher" / "final.ckpt")
    assert os.path.isfile(teacher)

    cli.main(["distill", *sets, "--set", "DECODER__KIND=tar", "--set", "DECODER__TIED=true",
              "--teacher", teacher, "--train-manifest", train_manifest,
              "--output-dir", str(tmp_path / "student"), "--db", db])
    student = str(tmp_path / "student" / "final.ckpt")
    assert os.path.isfile(student)

    report = str(tmp_path / "eval.jsonl")
    cli.main(["eval", "--checkpoint", teacher, "--manifest", eval_manifest, "--mode", "both",
              "--report", report, "--db", db])
    assert os.path.isfile(str(tmp_path / "eval_streaming.jsonl"))
    assert os.path.isfile(str(tmp_path / "eval_nonstreaming.jsonl"))

    cli.main(["bench", "--checkpoint", teacher, student, "--manifest", eval_manifest, "--repetitions", "3",
              "--beam", "2", "--limit", "1", "--db", db])

    capsys.readouterr()
    cli.main(["history", "--db", db, "--all"])
    out = capsys.readouterr().out
    assert "train" in out and "distill" in out

    engine = create_results_engine(db)
    history = get_run_history(engine)
    assert set(history["kind"]) == {"train", "distill"}
    assert history.loc[history["kind"] == "train", "best_wer"].notna().all()


# Scripts


def load_script(name):
    import importlib.util

    spec = importlib.util.spec_from_file_location(name, os.path.join(ROOT, "scripts", f"{name}.py"))
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_export_workbook(tmp_path):
    engine = create_results_engine(str(tmp_path / "results.db"))
    metrics = [{"step": 0, "loss": 3.0, "rnnt_loss": 3.0, "kd_loss": 0.0, "l2_loss": 0.0,
                "learning_rate": 1e-3, "uniform_loss": 4.0}]
    record_run(engine, "run-a", "train", tiny_config(), metrics, "a.ckpt", 100)
    output = str(tmp_path / "all.xlsx")
    message = load_script("export_results").export_workbook(engine, output)
    assert message.startswith("✅ Exported 2 tables")
    assert set(pd.read_excel(output, sheet_name=None)) == {"runs", "metrics"}


def test_plot_training_curves(tmp_path):
    metrics = [{"step": s, "loss": 5.0 - s, "uniform_loss": 6.0} for s in range(4)]
    path = write_jsonl(metrics, str(tmp_path / "run" / "metrics.jsonl"))
    output = str(tmp_path / "curves.png")
    message = load_script("plot_training_curves").plot_curves({"run": read_jsonl(path)}, output)
    assert "curves.png" in message
    assert os.path.getsize(output) > 0
