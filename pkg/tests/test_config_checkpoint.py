import numpy as np
import pytest

from atomic_fsl.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from atomic_fsl.config import RunConfig, load_config, parse_config
from atomic_fsl.data import FormatError
from atomic_fsl.encoder import ConfigError


def test_defaults_are_valid():
    cfg = RunConfig().validate()
    assert cfg.window.length == 16 and cfg.window.stride == 8
    assert cfg.moco.m == 0.999 and cfg.moco.tau == 0.07 and cfg.moco.queue_size == 4096
    assert cfg.episodic.K == 3 and cfg.episodic.N == 5 and cfg.episodic.lr == 0.01 and cfg.moco.lr == 0.03


def test_parse_dotted_keys_and_comments():
    cfg = parse_config("""
        # small run
        episodic.K=5
        episodic.lambda = 0.5   # alias of lam
        pooling.normalize_weights=false
        moco.tau=0.2
        seed=7
        paths.dataset=data/x.afsd
    """)
    assert cfg.episodic.K == 5 and cfg.episodic.lam == 0.5
    assert cfg.pooling.normalize_weights is False
    assert cfg.moco.tau == 0.2 and cfg.seed == 7 and cfg.paths.dataset == "data/x.afsd"


@pytest.mark.parametrize("text", ["episodic.KK=3", "nothing.K=3", "episodic=3", "seed.x=1", "moco"])
def test_unknown_keys_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("text", ["episodic.K=three", "moco.tau=0", "moco.m=1.5", "encoder.kernel=4",
                                  "window.stride=20", "pooling.normalize_weights=maybe"])
def test_out_of_range_values_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dumps_round_trip(tmp_path):
    cfg = parse_config("episodic.K=4\nmoco.steps=12\nablation.use_pretrain=false")
    (tmp_path / "run.cfg").write_text(cfg.dumps())
    assert "episodic.lambda=" in cfg.dumps()
    assert load_config(tmp_path / "run.cfg") == cfg


def test_checkpoint_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"encoder.block0.weight": rng.normal(size=(3, 4, 3)), "relation.blank_logit": np.asarray(0.25),
               "step": np.asarray(12.0), "empty": np.zeros((0, 4))}
    save_checkpoint(tmp_path / "a.afsc", tensors)
    loaded = load_checkpoint(tmp_path / "a.afsc")
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert loaded[k].shape == np.shape(tensors[k])
        np.testing.assert_array_equal(loaded[k], np.asarray(tensors[k], dtype=np.float32))
    save_checkpoint(tmp_path / "b.afsc", loaded)
    assert (tmp_path / "a.afsc").read_bytes() == (tmp_path / "b.afsc").read_bytes()


def test_checkpoint_layout():
    buf = encode_checkpoint({"ab": np.array([[1.0, 2.0]])})
    assert buf[:4] == b"AFSC"
    assert buf[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert buf[12:14] == (2).to_bytes(2, "little") and buf[14:16] == b"ab" and buf[16] == 2
    assert buf[17:25] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(buf[25:], "<f4").tolist() == [1.0, 2.0]


def test_checkpoint_errors():
    good = encode_checkpoint({"w": np.ones(3)})
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="offset"):
        decode_checkpoint(good[:-2])
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(good + b"\x00")
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(good[:4] + (2).to_bytes(4, "little") + good[8:])
    dup = good[:8] + (2).to_bytes(4, "little") + good[12:] + good[12:]
    with pytest.raises(FormatError, match="duplicate"):
        decode_checkpoint(dup)
