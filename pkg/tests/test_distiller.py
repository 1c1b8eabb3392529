import numpy as np
import pytest
import torch

from featrecon.data import make_digits
from featrecon.distiller import (
    DistillConfig,
    StudentConfig,
    build_student,
    distill_student,
    load_student,
    student_from_teacher,
    student_intermediates,
)
from featrecon.errors import ConfigError
from featrecon.losses import distill_distance


def test_build_student_desk_config(teacher):
    student = build_student(StudentConfig(), teacher.feature_dim)
    assert len(student.tap_shapes) == 4
    assert student.feature_dim == 1024
    feats, taps = student.features_and_taps(torch.zeros(2, 1, 32, 32))
    assert feats.shape == (2, 1024)
    assert [tuple(t.shape[1:]) for t in taps] == student.tap_shapes


def test_build_student_empty_taps_rejected():
    with pytest.raises(ConfigError, match="tap"):
        build_student(StudentConfig(taps=()))


def test_build_student_dim_mismatch_rejected():
    with pytest.raises(ConfigError, match="output dim"):
        build_student(StudentConfig(feature_dim=7), teacher_feature_dim=1024)


def test_student_copy_of_teacher_distance_zero(teacher, test_set):
    student = student_from_teacher(teacher)
    f_t = teacher.embed(torch.from_numpy(test_set.images[:64]))
    f_s = student.embed(test_set.images[:64])
    assert float(distill_distance(f_t, f_s).mean()) < 1e-10


def test_zero_training_steps_leave_model_unchanged(teacher, small_set):
    student = build_student(StudentConfig(), teacher.feature_dim)
    before = {k: v.clone() for k, v in student.net.state_dict().items()}
    distill_student(student, teacher.blackbox(), small_set, DistillConfig(epochs=0))
    after = student.net.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_intermediates_deterministic_and_shaped(student, test_set):
    maps = student_intermediates(student, np.concatenate([test_set.images[:2]] * 2))
    for m, shape in zip(maps, student.tap_shapes):
        assert tuple(m.shape[1:]) == shape
        assert torch.equal(m[:2], m[2:])


def test_intermediates_unknown_tap(student, test_set):
    with pytest.raises(ValueError, match="unknown tap"):
        student_intermediates(student, test_set.images[:1], taps=[9])


def test_intermediates_differentiable(student, test_set):
    x = torch.from_numpy(test_set.images[:2]).requires_grad_(True)
    maps = student.features_and_taps(x)[1]
    maps[-1].sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


def test_intermediate_gap_grows_with_noise(student, test_set):
    clean = torch.from_numpy(test_set.images[:32])
    rng = np.random.default_rng(0)
    noise = torch.from_numpy(rng.standard_normal(clean.shape).astype(np.float32))
    gaps = []
    with torch.no_grad():
        _, taps_clean = student.features_and_taps(clean)
        for amp in (0.05, 0.2, 0.6):
            noisy = (clean + amp * noise).clamp(-1, 1)
            _, taps_noisy = student.features_and_taps(noisy)
            gaps.append(float(sum((a - b).abs().mean() for a, b in zip(taps_clean, taps_noisy))))
    assert gaps[0] < gaps[1] < gaps[2]


def test_reference_distillation_distance(student):
    # pinned from the reference run; spec target is < 0.05
    assert student.metadata["val_distance"] < 0.05
    assert student.history["val_distance"][-1] < student.history["val_distance"][0]


def test_distillation_objective_equals_mean_distance(teacher, student, test_set):
    batch = test_set.images[:32]
    f_t = teacher.embed(torch.from_numpy(batch))
    f_s = student.embed(batch)
    per_sample = [float(distill_distance(f_t[i : i + 1], f_s[i : i + 1])) for i in range(32)]
    assert float(distill_distance(f_t, f_s).mean()) == pytest.approx(np.mean(per_sample), rel=1e-6)


def test_nearest_class_ranking_agreement(teacher, student, train_set, test_set):
    # student feature space orders classes like the teacher's for most queries
    probe_train = train_set.images[:1000]
    labels = train_set.labels[:1000]
    f_t = teacher.embed(torch.from_numpy(probe_train)).numpy()
    f_s = student.embed(probe_train).numpy()

    def centroids(feats):
        normed = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        return np.stack([normed[labels == k].mean(axis=0) for k in range(10)])

    c_t, c_s = centroids(f_t), centroids(f_s)
    q_t = teacher.embed(torch.from_numpy(test_set.images[:400])).numpy()
    q_s = student.embed(test_set.images[:400]).numpy()
    q_t /= np.linalg.norm(q_t, axis=1, keepdims=True)
    q_s /= np.linalg.norm(q_s, axis=1, keepdims=True)
    nn_t = (q_t @ c_t.T).argmax(axis=1)
    nn_s = (q_s @ c_s.T).argmax(axis=1)
    assert (nn_t == nn_s).mean() >= 0.90


def test_student_save_load_roundtrip(student, tmp_path, test_set):
    path = str(tmp_path / "s.pt")
    student.save(path)
    again = load_student(path)
    a = student.embed(test_set.images[:8]).numpy()
    b = again.embed(test_set.images[:8]).numpy()
    assert np.array_equal(a, b)
    assert again.tap_shapes == student.tap_shapes
