import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core_reft.continual import (
    AdaptedModel,
    DomainRouter,
    Learner,
    MetricsTable,
    PrototypeClassifier,
    build_prototypes,
    class_means,
    classify_cil,
    classify_til,
    evaluate_stage,
    load_experiment,
    route_and_classify_dil,
    run_scenario,
    save_experiment,
    train_first_task,
)
from core_reft.data import Dataset, Task, TaskStream, make_synthetic_cil, make_synthetic_dil, split_domains, split_tasks
from core_reft.errors import CheckpointTruncatedError, CheckpointVersionError, EmptyInputError, UnknownTaskError
from core_reft.linalg import SeededRng
from core_reft.nn import EncoderConfig, FrozenEncoder
from core_reft.reft import InterventionConfig
from core_reft.train import TrainHyper
from oracles import nearest_center, nearest_mean_predict, per_class_mean

TINY = dict(depth=2, dim=16, heads=2, input_mode="tokens", num_patches=4, token_dim=3)
FAST = TrainHyper(epochs=3, batch=16, lr=0.05)


def tiny(seed=3):
    return FrozenEncoder(EncoderConfig(**TINY, seed=seed)).freeze()


def small_stream(scenario="CIL", n_classes=6, inc=2, seed=0):
    _, down = make_synthetic_cil(n_classes, 12, 20, 1.0, seed=seed, tokens=4, base_classes=2, base_per_class=2)
    return split_tasks(down, inc, seed=1993, scenario=scenario)


# ---- prototype classifier


def test_prototypes_match_oracle():
    rng = SeededRng(0)
    x = rng.normal(size=(60, 5))
    y = np.repeat(np.arange(4), 15)
    means = class_means(x, y)
    oracle = per_class_mean(x, y)
    for c in range(4):
        np.testing.assert_allclose(means[c], oracle[c], rtol=0, atol=1e-12)
    clf = PrototypeClassifier()
    for c, m in means.items():
        clf.set(c, m)
    q = rng.normal(size=(40, 5))
    np.testing.assert_array_equal(clf.predict(q), nearest_mean_predict(oracle, q))


def test_cosine_ignores_scale_and_ties_go_low():
    clf = PrototypeClassifier()
    clf.set(7, [1.0, 0.0])
    clf.set(2, [3.0, 0.0])  # same direction as class 7 after normalisation
    clf.set(5, [0.0, 1.0])
    assert classify_cil(np.array([10.0, 0.1]), clf) == 2
    assert classify_cil(np.array([0.0, 0.2]), clf) == 5
    assert clf.classes == [2, 5, 7]


def test_dot_similarity_and_errors():
    clf = PrototypeClassifier("dot")
    clf.set(0, [1.0, 0.0])
    clf.set(1, [0.0, 1.0])
    assert clf.predict(np.array([[2.0, 1.0]])).tolist() == [0]
    with pytest.raises(ValueError):
        PrototypeClassifier("euclid")
    with pytest.raises(EmptyInputError):
        PrototypeClassifier().predict(np.zeros((1, 2)))


def test_build_prototypes_requires_every_class():
    model = AdaptedModel(tiny())
    ds = Dataset(np.ones((2, 12)), [0, 0], 2)
    with pytest.raises(EmptyInputError):
        build_prototypes(model, ds, PrototypeClassifier(), classes=(0, 1))
    with pytest.raises(EmptyInputError):
        build_prototypes(model, Dataset(np.zeros((0, 12)), [], 2), PrototypeClassifier())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2))
def test_til_prediction_stays_in_task(seed, task_id):
    rng = SeededRng(seed)
    task_classifiers = {}
    for t in range(3):
        clf = PrototypeClassifier()
        for c in range(3 * t, 3 * t + 3):
            clf.set(c, rng.normal(size=4))
        task_classifiers[t] = clf
    pred = classify_til(rng.normal(size=4), task_id, task_classifiers)
    assert pred in range(3 * task_id, 3 * task_id + 3)


def test_til_unknown_task():
    with pytest.raises(UnknownTaskError):
        classify_til(np.zeros(2), 4, {})


def test_single_task_til_equals_cil():
    stream = small_stream(inc=6)
    preds = {}
    for scenario in ("CIL", "TIL"):
        s = TaskStream(scenario, stream.tasks, stream.class_order)
        res = run_scenario(tiny(), InterventionConfig(), s, FAST, "frozen")
        feats = res.learner.model.features(stream.tasks[0].test.inputs)
        preds[scenario] = res.learner.predict(feats, 0)
    np.testing.assert_array_equal(preds["CIL"], preds["TIL"])


# ---- domain routing


def test_router_matches_oracle():
    rng = SeededRng(4)
    router = DomainRouter()
    centers = {}
    for d in (2, 0, 1):
        centers[d] = rng.normal(size=(3, 6), scale=3.0)
        clf = PrototypeClassifier()
        clf.set(d * 10, rng.normal(size=6))
        router.register(d, centers[d], clf)
    x = rng.normal(size=(200, 6), scale=3.0)
    np.testing.assert_array_equal(router.route(x), nearest_center(centers, x))
    doms, classes = router.predict(x)
    np.testing.assert_array_equal(classes, doms * 10)
    assert route_and_classify_dil(x[0], router) == 10 * nearest_center(centers, x[:1])[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_router_deterministic(seed):
    rng = SeededRng(seed)
    router = DomainRouter()
    for d in range(3):
        clf = PrototypeClassifier()
        clf.set(0, rng.normal(size=3))
        router.register(d, rng.normal(size=(2, 3)), clf)
    f = rng.normal(size=(5, 3))
    a, b = router.predict(f), router.predict(f.copy())
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_router_errors():
    with pytest.raises(EmptyInputError):
        DomainRouter().route(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        DomainRouter().register(0, np.zeros((0, 2)), PrototypeClassifier())


def test_dil_scenario_routes_well_separated_domains():
    ds = make_synthetic_dil(3, 3, 30, seed=1, dim=12, shift_scale=60.0)
    stream = split_domains(ds)
    res = run_scenario(tiny(), InterventionConfig(), stream, FAST, "frozen", k_centers=3)
    router = res.learner.router
    centers = {d: router.domains[d][0] for d in router.domains}
    for task in stream.tasks:
        feats = res.learner.model.features(task.test.inputs)
        routed = router.route(feats)
        np.testing.assert_array_equal(routed, nearest_center(centers, feats))
        assert np.mean(routed == task.domain_id) > 0.95


# ---- metrics


def test_metrics_identity_exact():
    table = MetricsTable()
    for v in (100.0 * 7 / 9, 50.0, 100.0 / 3):
        table.append(v)
    assert table.avg[2] == (table.last[0] + table.last[1] + table.last[2]) / 3
    assert table.consistent()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 400), st.integers(1, 400)), min_size=1, max_size=10))
def test_metrics_identity_property(pairs):
    table = MetricsTable()
    for hits, total in pairs:
        table.append(100.0 * min(hits, total) / total)
    for t in range(len(pairs)):
        assert table.avg[t] - sum(table.last[: t + 1]) / (t + 1) == 0


def test_evaluate_stage_counts():
    stream = small_stream()
    learner = Learner(AdaptedModel(tiny()), "CIL")
    learner.observe(stream.tasks[0])
    last, per_task = evaluate_stage(stream, 1, learner)
    pred = learner.predict(learner.model.features(stream.tasks[0].test.inputs))
    assert last == 100.0 * int(np.sum(pred == stream.tasks[0].test.labels)) / len(stream.tasks[0].test)
    assert per_task == [last]


# ---- first-task training and full runs


def test_train_first_task_keeps_backbone_and_reduces_loss():
    enc = tiny()
    stream = small_stream()
    before = enc.checksum()
    history = {}
    ivs = train_first_task(enc, InterventionConfig([0, 1], 2, "all"), stream.tasks[0].train,
                           TrainHyper(epochs=8, batch=16), history)
    assert enc.checksum() == before
    assert len(ivs) == 2 and history["loss"][-1] < history["loss"][0]
    assert len(history["orth"]) == 8


def test_train_first_task_deterministic():
    stream = small_stream()
    a = train_first_task(tiny(), InterventionConfig([1], 2, "cls"), stream.tasks[0].train, FAST)
    b = train_first_task(tiny(), InterventionConfig([1], 2, "cls"), stream.tasks[0].train, FAST)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.R, y.R)
        np.testing.assert_array_equal(x.W, y.W)


@pytest.mark.parametrize("method", ["core", "frozen", "finetune"])
def test_stability_after_first_task(method, monkeypatch):
    stream = small_stream()
    enc = tiny()
    snapshots = []
    original = Learner.observe

    def spy(self, task):
        m = self.model
        snapshots.append((m.encoder.checksum(), [(iv.R.tobytes(), iv.W.tobytes(), iv.b.tobytes()) for iv in m.interventions]))
        return original(self, task)

    monkeypatch.setattr(Learner, "observe", spy)
    res = run_scenario(enc, InterventionConfig([0, 1], 2, "all"), stream, FAST, method)
    assert len(snapshots) == 3 and all(s == snapshots[0] for s in snapshots)
    assert res.metrics.consistent()
    assert enc.checksum() == tiny().checksum()


def test_cil_label_space_grows():
    stream = small_stream()
    learner = Learner(AdaptedModel(tiny()), "CIL")
    seen = set()
    for task in stream.tasks:
        learner.observe(task)
        now = set(learner.clf.classes)
        assert now >= seen and now == seen | set(task.classes)
        seen = now


def test_identical_tasks_give_identical_accuracy():
    # two tasks with the same samples under relabelled classes score the same
    rng = SeededRng(2)
    x = rng.normal(size=(40, 12), scale=3.0)
    y = np.repeat([0, 1], 20)
    t0 = Task(0, (0, 1), 0, Dataset(x, y, 4), Dataset(x, y, 4))
    t1 = Task(1, (2, 3), 0, Dataset(x, y + 2, 4), Dataset(x, y + 2, 4))
    res = run_scenario(tiny(), InterventionConfig(), TaskStream("TIL", [t0, t1]), FAST, "frozen")
    assert res.metrics.per_task[1][0] == res.metrics.per_task[1][1]


def test_param_counts_by_method():
    stream = small_stream()
    enc = tiny()
    cfg = InterventionConfig([0, 1], 2, "all")
    assert run_scenario(enc, cfg, stream, FAST, "core").trainable_params == 2 * (2 * 2 * 16 + 2)
    assert run_scenario(enc, cfg, stream, FAST, "frozen").trainable_params == 0
    with pytest.raises(ValueError):
        run_scenario(enc, cfg, stream, FAST, "prompt")


@pytest.mark.parametrize("scenario", ["CIL", "TIL", "DIL"])
def test_experiment_checkpoint_round_trip(scenario):
    if scenario == "DIL":
        stream = split_domains(make_synthetic_dil(2, 3, 10, seed=0, dim=12))
    else:
        stream = small_stream(scenario)
    res = run_scenario(tiny(), InterventionConfig([1], 2, "all"), stream, FAST, "core", k_centers=2)
    blob = save_experiment(res.learner)
    back = load_experiment(blob)
    assert save_experiment(back) == blob
    for task in stream.tasks:
        f = back.model.features(task.test.inputs)
        np.testing.assert_array_equal(back.predict(f, task.task_id), res.learner.predict(f, task.task_id))
    with pytest.raises(CheckpointVersionError):
        load_experiment(b"CORERUN2" + blob[8:])
    with pytest.raises(CheckpointTruncatedError):
        load_experiment(blob[:-3])
    with pytest.raises(CheckpointTruncatedError):
        load_experiment(blob + b"\0")
