import json

import numpy as np
import pytest

from colld.autodiff import ops
from colld.data import SyntheticCorpus, sample_batch
from colld.distiller import (CoLLDDistiller, alignment, collapse_metric, distill, draw_masks, init_from_teacher,
                             load_train_state, new_train_state, train_step)
from colld.encoder import build_encoder, preset
from colld.exceptions import ConfigurationError, NumericError, UsageError
from colld.losses import DistillConfig
from colld.mapping import layer_map
from colld.rng import stream


def cfg(**kw):
    base = dict(total_steps=20, warmup_steps=2, batch_size=2, num_distractors=8, mask_prob=0.1, mask_span=5,
                peak_lr=1e-3, checkpoint_every=0, log_wallclock=False)
    base.update(kw)
    return DistillConfig(**base)


def pair(seed=0):
    return build_encoder(preset("tiny"), seed=seed), build_encoder(preset("tiny", layers=2), seed=seed + 1)


def test_collapse_examples():
    rng = np.random.default_rng(0)
    v = rng.normal(size=8)
    assert collapse_metric(np.tile(v, (50, 1))) == pytest.approx(1.0)
    assert collapse_metric(np.eye(6)) == 0.0
    assert abs(collapse_metric(rng.normal(size=(400, 64)))) < 0.05
    with pytest.raises(NumericError):
        collapse_metric(np.zeros((5, 3)))
    with pytest.raises(UsageError):
        collapse_metric(np.ones((1, 3)))


def test_zero_steps_changes_nothing(tiny_corpus):
    teacher, student = pair()
    before = {n: student.params[n].copy() for n in student.params}
    state = distill(cfg(), teacher, student, tiny_corpus, 0)
    assert state.step == 0 and state.history == []
    assert all(np.array_equal(before[n], state.student.params[n]) for n in before)


def test_teacher_is_never_written(tiny_corpus):
    teacher, student = pair()
    before = {n: teacher.params[n].copy() for n in teacher.params}
    distill(cfg(), teacher, student, tiny_corpus, 3)
    assert all(np.array_equal(before[n], teacher.params[n]) for n in before)


def test_metric_records(tiny_corpus):
    teacher, student = pair()
    state = distill(cfg(), teacher, student, tiny_corpus, 3)
    assert [r["step"] for r in state.history] == [1, 2, 3]
    first = state.history[0]
    assert set(first) == {"step", "lr", "loss", "loss_per_layer", "collapse", "elapsed_ms"}
    assert first["lr"] == pytest.approx(5e-4)
    assert len(first["loss_per_layer"]) == 2 and first["elapsed_ms"] is None
    assert 0 <= first["collapse"] <= 1


def test_steps_past_total_rejected(tiny_corpus):
    teacher, student = pair()
    with pytest.raises(ConfigurationError):
        distill(cfg(total_steps=2), teacher, student, tiny_corpus, 3)


def test_runs_are_reproducible(tiny_corpus, tmp_path):
    logs = []
    for i in range(2):
        teacher, student = pair()
        distill(cfg(), teacher, student, tiny_corpus, 4, root_seed=3, run_dir=tmp_path / str(i))
        logs.append((tmp_path / str(i) / "metrics.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_resume_matches_uninterrupted(tiny_corpus, tmp_path):
    teacher, student = pair()
    full = distill(cfg(), teacher, student, tiny_corpus, 6, root_seed=1)
    teacher, student = pair()
    distill(cfg(checkpoint_every=3), teacher, student, tiny_corpus, 3, root_seed=1, run_dir=tmp_path)
    state = load_train_state(tmp_path / "checkpoints" / "step_000003.ckpt")
    assert state.step == 3
    resumed = distill(state.cfg, teacher, state.student, tiny_corpus, 3, state=state)
    assert resumed.history == full.history[3:]
    for n in full.student.params:
        assert np.array_equal(full.student.params[n], resumed.student.params[n])


def test_loss_sees_only_masked_student_frames(tiny_corpus):
    teacher, student = pair()
    c = cfg()
    lmap = layer_map(2, 4)
    batch = sample_batch(tiny_corpus, c.batch_size, stream(0, "data", 0))
    keep = np.stack([m.as_bool(batch.features.shape[1]) for m in draw_masks(batch, c, 0, 0)])[..., None]

    def hook(layer, z):
        return ops.mul(z, keep.astype(z.dtype))

    plain = new_train_state(c, teacher, student.copy(), 0)
    hooked = new_train_state(c, teacher, student.copy(), 0)
    a = train_step(plain, teacher, tiny_corpus, lmap)
    b = train_step(hooked, teacher, tiny_corpus, lmap, tap_hook=hook)
    assert a["loss"] == b["loss"]
    for n in plain.student.params:
        assert np.array_equal(plain.student.params[n], hooked.student.params[n]), n


def test_init_from_teacher():
    teacher, student = pair()
    init_from_teacher(student, teacher, "layer_skipping")
    # 2 student layers over 4 teacher layers map to teacher blocks 1 and 4
    assert np.array_equal(student.params["blocks.1.ffn1.w1"], teacher.params["blocks.1.ffn1.w1"])
    assert np.array_equal(student.params["blocks.2.ffn1.w1"], teacher.params["blocks.4.ffn1.w1"])
    init_from_teacher(student, teacher, "bottom_layers")
    assert np.array_equal(student.params["blocks.2.ffn1.w1"], teacher.params["blocks.2.ffn1.w1"])
    narrow = build_encoder(preset("tiny", layers=2, dim=16, ffn=32), seed=0)
    with pytest.raises(ConfigurationError):
        init_from_teacher(narrow, teacher, "layer_skipping")


def test_alignment_is_per_layer_and_bounded(tiny_corpus):
    teacher, student = pair()
    state = new_train_state(cfg(), teacher, student, 0)
    values = alignment(state, teacher, tiny_corpus, num_utterances=4)
    assert len(values) == 2 and all(-1 <= v <= 1 for v in values)
    assert values == alignment(state, teacher, tiny_corpus, num_utterances=4)


def test_estimator_fit_transform():
    teacher = build_encoder(preset("tiny"), seed=0)
    corpus = SyntheticCorpus(num_utterances=6, min_frames=40, max_frames=60, seed=0)
    seqs = [corpus[i][0] for i in range(6)]
    est = CoLLDDistiller(teacher=teacher, steps=3, num_distractors=8, mask_prob=0.1, mask_span=4,
                         distill_options={"log_wallclock": False})
    assert est.get_params()["steps"] == 3
    out = est.fit(seqs).transform(seqs)
    assert len(out) == 6 and out[0].shape == (seqs[0].frames, teacher.config.dim)
    assert len(est.history_) == 3 and est.student_.config.layers == 2
    again = CoLLDDistiller(**est.get_params()).fit(seqs)
    assert again.history_ == est.history_


def test_estimator_needs_teacher():
    with pytest.raises(ConfigurationError):
        CoLLDDistiller().fit([np.zeros((10, 160))])


def test_metrics_file_is_json_lines(tiny_corpus, tmp_path):
    teacher, student = pair()
    distill(cfg(), teacher, student, tiny_corpus, 2, run_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(ln)["step"] for ln in lines] == [1, 2]
    assert (tmp_path / "checkpoints" / "last.ckpt").exists()
