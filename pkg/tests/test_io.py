import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from antn import io
from antn.datagen import SynthConfig
from antn.errors import ConfigError, DataError
from antn.segnets import CleanNet, MiniUNetSpec, TransitionNet
from antn.trainer import ModelCheckpoint, NtnTransitionLayer, TrainConfig


def test_tiny_ppm_round_trip(tmp_path):
    img = np.array([[[0, 128, 255], [1, 2, 3]], [[9, 8, 7], [255, 0, 0]]]) / 255.0
    p = tmp_path / "a.ppm"
    io.write_ppm(p, img)
    raw = p.read_bytes()
    back = io.read_ppm(p)
    assert np.array_equal(back, img)
    io.write_ppm(p, back)
    assert p.read_bytes() == raw


@settings(max_examples=25)
@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_ppm_bytes_round_trip(tmp_path_factory, raw):
    p = tmp_path_factory.mktemp("ppm") / "x.ppm"
    io.write_ppm(p, raw / 255.0)
    assert np.array_equal(np.rint(io.read_ppm(p) * 255).astype(np.uint8), raw)


@settings(max_examples=25)
@given(arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 255)))
def test_pgm_round_trip(tmp_path_factory, labels):
    p = tmp_path_factory.mktemp("pgm") / "x.pgm"
    io.write_pgm(p, labels)
    assert np.array_equal(io.read_pgm(p), labels)


def test_header_comments_are_skipped(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\x03")
    assert io.read_pgm(p, 4).tolist() == [[0, 3]]


def test_label_out_of_range_rejected(tmp_path):
    p = tmp_path / "l.pgm"
    io.write_pgm(p, np.array([[0, 4]]))
    with pytest.raises(DataError, match="label 4"):
        io.read_pgm(p, 4)


@pytest.mark.parametrize(
    "payload,msg",
    [
        (b"P6\n2 2\n65535\n" + bytes(24), "maxval"),
        (b"P3\n1 1\n255\n0 0 0", "magic"),
        (b"P6\n2 2\n255\n" + bytes(5), "truncated"),
        (b"P6\n2 x\n255\n", "unexpected"),
        (b"P6\n2 2", "truncated"),
    ],
)
def test_malformed_ppm(tmp_path, payload, msg):
    p = tmp_path / "bad.ppm"
    p.write_bytes(payload)
    with pytest.raises(DataError, match=msg):
        io.read_ppm(p)


def antn_checkpoint(c=4, f=2, mode="row-softmax", seed=0):
    rng = np.random.default_rng(seed)
    spec = MiniUNetSpec(base_filters=f, num_classes=c)
    nets = {
        "clean": CleanNet(spec, rng),
        "trans1": TransitionNet(spec, mode, rng),
        "trans2": TransitionNet(spec, mode, rng),
    }
    return ModelCheckpoint("antn", spec, nets, mode)


@pytest.mark.parametrize("mode", ["row-softmax", "uniform-remainder"])
def test_checkpoint_round_trip(tmp_path, mode):
    ck = antn_checkpoint(mode=mode)
    p = tmp_path / "m.ckpt"
    io.save_checkpoint(p, ck)
    back = io.load_checkpoint(p)
    assert back.method == "antn" and back.readout_mode == mode
    for role in ck.nets:
        assert np.array_equal(back.nets[role].params.flat(), ck.nets[role].params.flat())
    assert io.checkpoint_bytes(back) == p.read_bytes()


def test_ntn_checkpoint_round_trip():
    spec = MiniUNetSpec(base_filters=2, num_classes=3)
    layer = NtnTransitionLayer(3)
    layer.params["Q.logits"][...] = np.random.default_rng(1).normal(size=(3, 3))
    ck = ModelCheckpoint("ntn", spec, {"clean": CleanNet(spec), "ntn": layer})
    back = io.checkpoint_from_bytes(io.checkpoint_bytes(ck))
    assert back.method == "ntn"
    assert np.array_equal(back.nets["ntn"].matrix, layer.matrix)


def test_checkpoint_error_kinds():
    data = io.checkpoint_bytes(antn_checkpoint())
    with pytest.raises(io.BadMagicError):
        io.checkpoint_from_bytes(b"XXXXX" + data[5:])
    with pytest.raises(io.VersionError):
        io.checkpoint_from_bytes(data[:5] + b"\x02\x00" + data[7:])
    for cut in (3, 8, 20, len(data) - 1):
        with pytest.raises(io.TruncatedError):
            io.checkpoint_from_bytes(data[:cut])
    with pytest.raises(io.ShapeMismatchError):
        io.checkpoint_from_bytes(data, num_classes=3)
    with pytest.raises(io.CheckpointError, match="trailing"):
        io.checkpoint_from_bytes(data + b"\x00")


def test_checkpoint_parameter_count_mismatch():
    data = bytearray(io.checkpoint_bytes(antn_checkpoint()))
    # bump the declared filter count of the clean net: parameters no longer fit
    data[5 + 4 + 2] = 3
    with pytest.raises(io.ShapeMismatchError):
        io.checkpoint_from_bytes(bytes(data))


def test_run_config_parse_and_serialize():
    text = "# desk run\nseed = 7\nlr_main=0.001\nradius_range=4,9\nreadout_mode=uniform-remainder\n"
    cfg = io.RunConfig.parse(text)
    assert cfg.values == {"seed": 7, "lr_main": 0.001, "radius_range": (4, 9), "readout_mode": "uniform-remainder"}
    assert io.RunConfig.parse(cfg.serialize()).values == cfg.values
    t = cfg.train_config()
    assert isinstance(t, TrainConfig) and t.seed == 7 and t.lr_main == 0.001
    s = cfg.synth_config()
    assert isinstance(s, SynthConfig) and s.seed == 7 and s.radius_range == (4, 9)


@pytest.mark.parametrize("text", ["bogus=1", "seed", "seed=abc", "lr_main=fast"])
def test_run_config_rejects(text):
    with pytest.raises(ConfigError):
        io.RunConfig.parse(text)


def test_config_from_dataclass_round_trip():
    cfg = TrainConfig(seed=3, epochs_ntn=4)
    assert io.config_from(cfg).train_config() == cfg
