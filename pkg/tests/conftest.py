"""Shared fixtures. Heavy reference artifacts (trained teacher, flow, student)
are session-scoped and built once; unit tests prefer tiny local models."""

import numpy as np
import pytest
import torch

torch.set_num_threads(2)

from featrecon.data import Dataset, make_digits
from featrecon.distiller import DistillConfig, StudentConfig, build_student, distill_student
from featrecon.flow import FlowTrainConfig, init_class_priors, train_flow
from featrecon.oracle import train_teacher

TRAIN_SIZE = 6000
TEST_SIZE = 1500


@pytest.fixture(scope="session")
def train_set() -> Dataset:
    return make_digits(TRAIN_SIZE, seed=0, split="train")


@pytest.fixture(scope="session")
def test_set() -> Dataset:
    return make_digits(TEST_SIZE, seed=0, split="test")


@pytest.fixture(scope="session")
def small_set() -> Dataset:
    """Cheap corpus for unit-level checks."""
    return make_digits(600, seed=1, split="train")


@pytest.fixture(scope="session")
def teacher(train_set, test_set):
    """The reference teacher: 10 epochs, seed 0."""
    return train_teacher(train_set, test_set, epochs=10, seed=0)


@pytest.fixture(scope="session")
def priors():
    return init_class_priors(10, 1024, spacing=8.0)


@pytest.fixture(scope="session")
def trained_flow(train_set, priors):
    """The reference bijection, trained on the full training corpus."""
    return train_flow(train_set, priors, FlowTrainConfig(epochs=2, batch_size=64, seed=0))


@pytest.fixture(scope="session")
def student(teacher, train_set):
    """The reference distilled student."""
    net = build_student(StudentConfig(), teacher.feature_dim)
    return distill_student(net, teacher.blackbox(), train_set, DistillConfig(epochs=8, seed=0))


@pytest.fixture(scope="session")
def artifact_dir(tmp_path_factory, teacher, trained_flow, student):
    """Reference artifacts persisted to disk for path-based APIs."""
    path = tmp_path_factory.mktemp("artifacts")
    teacher.save(str(path / "teacher.pt"))
    trained_flow.save(str(path / "flow.pt"), extra={"classes": 10, "spacing": 8.0, "seed": 0})
    student.save(str(path / "student.pt"))
    return path
