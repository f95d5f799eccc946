import json

import numpy as np
import pytest

from nasf import curator, engine
from nasf.comms import CommError, ProtocolError, fnv1a_64, run_threads
from nasf.descriptor import Descriptor, LayerKind
from nasf.evaluator import (
    EvaluationConfig, EvaluationResult, agree_on, descriptor_evaluate, distributed_descriptor_evaluate,
    flatten_gradients, flatten_parameters, train_step, unflatten_gradients,
)
from nasf.search.ga import Chromosome, decode

SHAPE = (3, 6, 6)


def small_data(seed=0, n_train=48, n_test=24, classes=4):
    return curator.synthetic_dataset(seed, n_train, n_test, classes, SHAPE)


def net(seed=0):
    return decode(Chromosome((3, 4, 3, 4)), SHAPE, 4).compile(SHAPE, seed=seed)


def reference_training(data, batch, steps, lr, seed):
    """Plain SGD on each global batch in one process (no weighting, no comms)."""
    network = net(seed)
    done = 0
    for epoch in range(100):
        for images, labels, _ in curator.lockstep_batches(data, batch, epoch):
            _, grad = engine.softmax_cross_entropy(network.forward(images), labels)
            network.backward(grad)
            engine.sgd_step(network.states, lr)
            done += 1
            if done == steps:
                return flatten_parameters(network)


def distributed_training(env, data, batch, steps, lr, seed):
    network = net(seed)
    done = 0
    for epoch in range(100):
        for images, labels, count in curator.lockstep_batches(data, batch, epoch, env.rank, env.world_size):
            train_step(network, images, labels, count, lr, env)
            done += 1
            if done == steps:
                return flatten_parameters(network)


@pytest.mark.parametrize("world", [1, 2, 4])
@pytest.mark.parametrize("batch", [8, 6])
def test_distributed_training_matches_union_batch_training(world, batch):
    data, _ = small_data()
    expected = reference_training(data, batch, 10, 0.1, seed=3)
    got = run_threads(world, distributed_training, data, batch, 10, 0.1, 3)
    for params in got:
        assert np.linalg.norm(params - expected) / np.linalg.norm(expected) < 1e-9
        assert params.tobytes() == got[0].tobytes()  # ranks agree bitwise


def test_gradient_flattening_round_trip():
    network = net()
    rng = np.random.default_rng(0)
    for s in network.states:
        s.weight_gradients[...] = rng.normal(size=s.weights.shape)
        s.bias_gradients[...] = rng.normal(size=s.biases.shape)
    flat = flatten_gradients(network)
    assert flat.size == decode(Chromosome((3, 4, 3, 4)), SHAPE, 4).count_parameters(SHAPE)
    before = [(s.weight_gradients.copy(), s.bias_gradients.copy()) for s in network.states]
    unflatten_gradients(network, flat)
    for (w, b), s in zip(before, network.states):
        assert w.tobytes() == s.weight_gradients.tobytes() and b.tobytes() == s.bias_gradients.tobytes()
    unflatten_gradients(network, np.zeros_like(flat))
    assert not flatten_gradients(network).any()
    with pytest.raises(ProtocolError):
        unflatten_gradients(network, flat[:-1])


def test_evaluation_is_deterministic_and_reports_parameters():
    desc = decode(Chromosome((3, 4, 3, 4)), SHAPE, 4)
    cfg = EvaluationConfig(epochs=1, batch_size=8, seed=2)
    a = descriptor_evaluate(desc, small_data(), cfg)
    b = descriptor_evaluate(desc, small_data(), cfg)
    assert a.ok and a.test_accuracy == b.test_accuracy
    assert a.trainable_parameters == desc.count_parameters(SHAPE)
    assert a.epochs_run == 1 and 0 <= a.test_accuracy <= 1


def test_untrained_network_scores_chance():
    scores = []
    for seed in range(20):
        data = curator.synthetic_dataset(seed, 10, 200, 10, (3, 4, 4))
        desc = decode(Chromosome((3, 4, 3, 4)), (3, 4, 4), 10)
        scores.append(descriptor_evaluate(desc, data, EvaluationConfig(epochs=0, seed=seed)).test_accuracy)
    assert abs(np.mean(scores) - 0.1) <= 0.05


def test_small_conv_net_learns_blobs():
    data = curator.synthetic_dataset(0, 512, 256, 4, (3, 8, 8))
    desc = decode(Chromosome((3, 8, 3, 8)), (3, 8, 8), 4)
    assert descriptor_evaluate(desc, data, EvaluationConfig(epochs=5)).test_accuracy > 0.9


def test_failures_score_zero():
    bad = Descriptor()
    bad.add_layer_sequential(LayerKind.CONV2D, {"out_channels": 2, "kernel": 3})
    bad.add_layer_sequential(LayerKind.DENSE, {"out_features": 4})
    res = descriptor_evaluate(bad, small_data(), EvaluationConfig())
    assert res.status == "failed" and res.reason.startswith("compile:") and res.fitness == 0.0

    desc = decode(Chromosome((3, 4, 3, 4)), SHAPE, 4)
    res = descriptor_evaluate(desc, small_data(), EvaluationConfig(learning_rate=1e300))
    assert res.status == "failed" and res.reason == "diverged" and res.fitness == 0.0


def test_distributed_world_of_one_equals_local():
    desc = decode(Chromosome((3, 4, 3, 4)), SHAPE, 4)
    cfg = EvaluationConfig(epochs=1, batch_size=8)
    local = descriptor_evaluate(desc, small_data(), cfg)
    [dist] = run_threads(1, lambda env: distributed_descriptor_evaluate(desc, small_data(), cfg, env))
    assert dist.test_accuracy == local.test_accuracy


def test_distributed_evaluation_matches_local_accuracy():
    desc = decode(Chromosome((3, 4, 3, 4)), SHAPE, 4)
    cfg = EvaluationConfig(epochs=2, batch_size=8)
    local = descriptor_evaluate(desc, small_data(), cfg)
    results = run_threads(3, lambda env: distributed_descriptor_evaluate(desc, small_data(), cfg, env))
    assert all(r.test_accuracy == pytest.approx(local.test_accuracy, abs=1e-12) for r in results)
    assert len({r.to_json() for r in results}) == 1


def test_distributed_evaluation_rejects_mismatched_descriptors():
    def body(env):
        genes = (3, 4, 3, 4) if env.rank == 0 else (3, 4, 3, 5)
        return distributed_descriptor_evaluate(decode(Chromosome(genes), SHAPE, 4), small_data(),
                                               EvaluationConfig(), env)
    with pytest.raises(ProtocolError, match="differs"):
        run_threads(2, body)


def test_lost_rank_during_training_is_a_comm_failure():
    desc = decode(Chromosome((3, 4, 3, 4)), SHAPE, 4)

    def body(env):
        if env.rank == 1:
            # pass the hash guard, then vanish mid-training
            fp = fnv1a_64((desc.to_json() + json.dumps(EvaluationConfig().to_dict(), sort_keys=True)).encode())
            agree_on(env, fp, "descriptor/config hash")
            for ch in env._channels.values():
                ch.close()
            return None
        return distributed_descriptor_evaluate(desc, small_data(), EvaluationConfig(), env)

    res = run_threads(2, body, timeout=5)[0]
    assert res.status == "failed" and res.reason.startswith("comm:")


def test_result_serialization():
    r = EvaluationResult(0.5, 12, 1.25, 2)
    assert EvaluationResult.from_dict(r.to_dict()) == r
    f = EvaluationResult.failed("diverged", 7)
    assert EvaluationResult.from_dict(f.to_dict()) == f and f.fitness == 0.0


@pytest.mark.parametrize("kwargs", [{"epochs": -1}, {"batch_size": 0}, {"learning_rate": 0},
                                    {"train_subset": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        EvaluationConfig(**kwargs)


def test_comm_error_is_exported():
    assert issubclass(ProtocolError, CommError)
