import hashlib

import numpy as np
import pytest

from speakernav.checkpoints import param_arrays
from speakernav.datasets import SplitSpec, export_dataset, load_split
from speakernav.errors import ContractError, ParameterError, TrainingDivergence
from speakernav.follower import FollowerConfig
from speakernav.speaker import SpeakerModel
from speakernav.training import (RunConfig, SpeakerData, ab_follower, back_translate, build_vocab,
                                 follower_episodes, progress_mse, sample_unlabelled_paths,
                                 train_follower, train_speaker, uses_augmented)

from oracles import tiny_config


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = SplitSpec(train_graphs=[0, 1], unseen_graphs=[7], n_train=16, n_val_seen=6, n_val_unseen=6,
                     n_rooms=3, nodes_per_room=3, min_len=3, max_len=5)
    export_dataset(spec, root)
    train, store = load_split(root, "train")
    seen, _ = load_split(root, "val_seen", store)
    unseen, _ = load_split(root, "val_unseen", store)
    vocab = build_vocab(train)
    return dict(root=root, train=train, seen=seen, unseen=unseen, store=store, vocab=vocab)


def speaker_config(**kw):
    return tiny_config(**{"d_v": 64, "n_views": 36, "max_decode_len": 30, **kw})


def digest(arrays, prefix):
    h = hashlib.sha256()
    for name in sorted(arrays):
        if name.startswith(prefix):
            h.update(arrays[name].tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- config and schedule

def test_run_config_round_trip_and_validation():
    cfg = RunConfig(data_dir="d", aug_ratio=0.5)
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.hash == cfg.hash
    with pytest.raises(ParameterError):
        RunConfig.from_dict({"data_dir": "d", "bogus": 1})
    for bad in (0.0, 1.5):
        with pytest.raises(ParameterError):
            RunConfig(data_dir="d", aug_ratio=bad)


def test_alternation_schedule():
    pattern = [uses_augmented(k, 1.0) for k in range(8)]
    assert pattern == [False, True] * 4
    half = [uses_augmented(k, 0.5) for k in range(9)]
    assert sum(half) == 3 and half[2] and half[5] and half[8]


# ---------------------------------------------------------------- speaker training

def test_lambda_one_leaves_progress_head_untouched(data):
    sd = SpeakerData(data["train"], data["vocab"])
    cfg = speaker_config(lam=1.0)
    model = SpeakerModel(cfg, data["vocab"])
    before = param_arrays(model)
    run = train_speaker(cfg, data["vocab"], sd, iterations=5, eval_every=0, model=model)
    after = param_arrays(run.model)
    assert digest(before, "spm_") == digest(after, "spm_")
    assert digest(before, "swp_") != digest(after, "swp_")


def test_speaker_histories_are_deterministic(data):
    sd = SpeakerData(data["train"], data["vocab"])
    ev = SpeakerData(data["unseen"], data["vocab"])
    cfg = speaker_config()
    a = train_speaker(cfg, data["vocab"], sd, ev, iterations=6, eval_every=3, seed=4)
    b = train_speaker(cfg, data["vocab"], sd, ev, iterations=6, eval_every=3, seed=4)
    assert a.history == b.history and len(a.history) == 2
    assert set(a.history[0]) == {"iteration", "loss_swp", "loss_spm", "bleu4"}
    c = train_speaker(cfg, data["vocab"], sd, ev, iterations=6, eval_every=3, seed=5)
    assert c.history != a.history


def test_extra_eval_and_early_stop(data):
    sd = SpeakerData(data["train"], data["vocab"])
    run = train_speaker(speaker_config(), data["vocab"], sd, sd, iterations=9, eval_every=3,
                        extra_eval=lambda m: {"mse": progress_mse(m, sd)},
                        stop_when=lambda rec: rec["iteration"] >= 6)
    assert [r["iteration"] for r in run.history] == [3, 6]
    assert all(r["mse"] >= 0 for r in run.history)


def test_divergence_names_the_batch_seed(data):
    sd = SpeakerData(data["train"], data["vocab"])
    cfg = speaker_config()
    model = SpeakerModel(cfg, data["vocab"])
    model.token_table.data[:, :] = np.nan
    with pytest.raises(TrainingDivergence, match=r"batch seed \[3, 1\]"):
        train_speaker(cfg, data["vocab"], sd, iterations=2, eval_every=0, seed=3, model=model)


def test_empty_speaker_data_is_rejected(data):
    with pytest.raises(ParameterError):
        SpeakerData([], data["vocab"])


# ---------------------------------------------------------------- back-translation

def test_back_translation_accounting_and_determinism(data):
    model = SpeakerModel(speaker_config(max_decode_len=8), data["vocab"])
    graphs = [data["store"][gid] for gid in sorted({e.graph_id for e in data["train"]})]
    paths = sample_unlabelled_paths(graphs, 10, 3, 5, seed=1)
    assert len(paths) == 10 and len({(g.graph_id, tuple(p)) for g, p in paths}) == 10
    recs, stats = back_translate(model, paths, mfd1_rate=0.0)
    again, _ = back_translate(model, paths, mfd1_rate=0.0, seed=9)
    assert recs == again  # greedy and no dropout: the seed is irrelevant
    assert stats["kept"] == len(recs) == stats["input_paths"] - stats["truncated"]
    assert all(r["pseudo"] and r["segments"] == [] for r in recs)
    noisy_a, _ = back_translate(model, paths, mfd1_rate=0.3, seed=2)
    noisy_b, _ = back_translate(model, paths, mfd1_rate=0.3, seed=2)
    assert noisy_a == noisy_b
    with pytest.raises(ParameterError):
        back_translate(model, paths, mfd1_rate=1.0)


def test_excluded_paths_are_not_resampled(data):
    g = data["store"][data["train"][0].graph_id]
    first = sample_unlabelled_paths([g], 5, 3, 4, seed=0)
    keys = {(g.graph_id, tuple(p)) for _, p in first}
    second = sample_unlabelled_paths([g], 5, 3, 4, seed=0, exclude=keys)
    assert not keys & {(g.graph_id, tuple(p)) for _, p in second}


# ---------------------------------------------------------------- follower A/B

def follower_config(**kw):
    base = dict(d_model=8, heads=2, head_dim=4, ffn_hidden=8, iterations=4, eval_every=2,
                batch_size=4, max_steps=6)
    base.update(kw)
    return FollowerConfig(**base)


def test_ab_report_shape_and_empty_augmentation(data):
    v = data["vocab"]
    orig = follower_episodes(data["train"], v)
    seen, unseen = follower_episodes(data["seen"], v), follower_episodes(data["unseen"], v)
    rep = ab_follower(follower_config(), v, data["store"], orig, [], seen, unseen, seeds=(0, 1))
    numbers = [x for arm in rep["arms"].values() for seed in arm["per_seed"].values()
               for split in seed.values() for x in split.values()]
    assert len(numbers) == 2 * 2 * 2 * 4
    assert rep["arms"]["A"] == rep["arms"]["B"]
    assert set(rep["arms"]["A"]["summary"]["val_unseen"]["SR"]) == {"mean", "std"}
    assert rep["sizes"] == {"D": len(orig), "D_prime": 0}


def test_ab_rejects_mismatched_arms(data):
    v = data["vocab"]
    eps = follower_episodes(data["train"], v)
    with pytest.raises(ContractError):
        ab_follower(follower_config(), v, data["store"], eps, eps, eps, eps,
                    config_b=follower_config(lr=5e-4))


def test_follower_alternates_sources(data):
    v = data["vocab"]
    orig = follower_episodes(data["train"], v)
    aug = follower_episodes(data["seen"], v)
    a = train_follower(follower_config(eval_every=0), v, data["store"], orig, aug, seed=1)
    b = train_follower(follower_config(eval_every=0), v, data["store"], orig, [], seed=1)
    diffs = [not np.array_equal(p.data, q.data) for p, q in zip(a.model.parameters(), b.model.parameters())]
    assert any(diffs)
