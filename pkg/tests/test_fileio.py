import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speakernav.checkpoints import load_follower, load_speaker, save_follower, save_speaker
from speakernav.errors import CorruptCheckpointError, IncompatibleCheckpointError, ValidationError
from speakernav.fileio import (MAGIC, atomic_write, load_checkpoint, read_jsonl, read_records,
                               save_checkpoint, write_jsonl)
from speakernav.follower import FollowerConfig, FollowerModel
from speakernav.speaker import SpeakerModel, TrajectoryBatch
from speakernav.tensor import no_grad

from oracles import random_steps, tiny_config, tiny_vocab


def test_speaker_round_trip_is_bit_identical(tmp_path):
    vocab, cfg = tiny_vocab(), tiny_config()
    model = SpeakerModel(cfg, vocab)
    rng = np.random.default_rng(0)
    for p in model.parameters():
        p.data[...] = rng.normal(size=p.data.shape)
    path = save_speaker(tmp_path / "s.ckpt", model, {"seed": 3})
    back, header = load_speaker(path)
    assert header["provenance"]["seed"] == 3 and back.vocab == vocab
    batch = TrajectoryBatch.from_trajectories([random_steps(rng, 3, cfg)])
    with no_grad():
        a = model.generate(batch)[0]
        b = back.generate(batch)[0]
    assert a.words == b.words and a.progress == b.progress
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)


def test_follower_round_trip_and_kind_check(tmp_path):
    model = FollowerModel(FollowerConfig(d_model=8, heads=2, head_dim=4, ffn_hidden=8), tiny_vocab())
    path = save_follower(tmp_path / "f.ckpt", model)
    back, _ = load_follower(path)
    for p, q in zip(model.parameters(), back.parameters()):
        assert np.array_equal(p.data, q.data)
    with pytest.raises(IncompatibleCheckpointError):
        load_speaker(path)


def test_truncated_and_modified_checkpoints_are_corrupt(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", "x", {}, [], {"w": np.arange(6.0).reshape(2, 3)}, {})
    blob = path.read_bytes()
    for cut in (5, len(MAGIC) + 4, len(blob) // 2, len(blob) - 1):
        (tmp_path / "t.ckpt").write_bytes(blob[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")
    flipped = bytearray(blob)
    flipped[-40] ^= 0x01
    (tmp_path / "m.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "m.ckpt")


def test_version_mismatch_is_incompatible(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", "x", {}, [], {"w": np.zeros(2)}, {})
    blob = bytearray(path.read_bytes())
    blob[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(IncompatibleCheckpointError, match="version 99"):
        load_checkpoint(path)


def test_shape_mismatch_is_incompatible(tmp_path):
    model = SpeakerModel(tiny_config(), tiny_vocab())
    save_speaker(tmp_path / "s.ckpt", model)
    header = load_checkpoint(tmp_path / "s.ckpt")
    arrays = dict(header["arrays"])
    arrays["swp_head.bias"] = np.zeros(3)
    save_checkpoint(tmp_path / "bad.ckpt", "speaker", header["config"], header["vocab"], arrays, {})
    with pytest.raises(IncompatibleCheckpointError):
        load_speaker(tmp_path / "bad.ckpt")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 1000))
def test_random_parameter_sets_round_trip(tmp_path_factory, seed, size):
    rng = np.random.default_rng(seed)
    sizes = rng.multinomial(size, np.ones(3) / 3)
    params = {f"p{i}": rng.normal(size=int(n)) * 10.0 ** rng.integers(-300, 300) for i, n in enumerate(sizes)}
    params["p0"] = np.concatenate([params["p0"], [0.0, -0.0, np.inf, -np.inf, 5e-324]])
    path = tmp_path_factory.mktemp("fuzz") / "c.ckpt"
    save_checkpoint(path, "fuzz", {"seed": seed}, ["a"], params, {})
    back = load_checkpoint(path)["arrays"]
    for name, arr in params.items():
        assert back[name].tobytes() == arr.astype("<f8").tobytes()


def test_jsonl_errors_name_the_line(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text(json.dumps({"id": "a"}) + "\n\n" + "{not json\n")
    with pytest.raises(ValidationError, match=r":3: invalid JSON"):
        read_jsonl(path)
    path.write_text(json.dumps({"id": "a", "graph_id": "g"}) + "\n")
    with pytest.raises(ValidationError, match=r":1: missing field\(s\) trajectory"):
        read_records(path)


def test_jsonl_round_trip(tmp_path):
    recs = [{"id": str(i), "x": [i, i + 0.5]} for i in range(5)]
    assert read_jsonl(write_jsonl(tmp_path / "a.jsonl", recs)) == recs


def test_atomic_write_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.txt"
    atomic_write(target, "old")

    with pytest.raises(TypeError):
        atomic_write(target, 12345)  # not bytes: fails before rename
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]
    atomic_write(target, b"new")
    assert target.read_bytes() == b"new" and not any(p.name.startswith(".") for p in tmp_path.iterdir())
    assert os.stat(target).st_size == 3
