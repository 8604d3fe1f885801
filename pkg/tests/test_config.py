import pytest

from strcn.config import ConfigError, RunConfig, load_config, parse_assignments, parse_text


def test_defaults_match_reference_constants():
    cfg = load_config()
    assert cfg.variant == "G"
    assert (cfg.crop.delta1, cfg.crop.delta2, cfg.crop.delta3, cfg.crop.delta4) == (0.4, 0.6, 2.2, 1.8)
    assert cfg.magnify.alpha == 8 and cfg.magnify.wavelength == 16
    assert cfg.mask.p == 30 and cfg.mask.frames == 30
    assert cfg.train.lr == 1e-3 and cfg.train.momentum == 0.9
    assert cfg.train.weight_decay == 5e-4 and cfg.train.damping == 0.8
    assert cfg.train.batch_size == 20 and cfg.train.tol == 1e-3
    assert cfg.flow.sigma == 0.03 and cfg.flow.smoothness == 0.05
    assert cfg.flow.levels == 3 and cfg.flow.warps == 10
    assert cfg.augmentation.n_variants == 50
    assert cfg.out_size == (300, 245)
    assert load_config(overrides={"variant": "a"}).out_size == (64, 48)


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nvariant = A\nmask.p = 50  # trailing\n\ntrain.max_epochs = 7\n")
    cfg = load_config(path, {"mask.p": "10"})
    assert cfg.variant == "A"
    assert cfg.mask.p == 10.0
    assert cfg.train.max_epochs == 7


def test_unknown_and_invalid_keys_are_named():
    with pytest.raises(ConfigError, match="mask.q"):
        load_config(overrides={"mask.q": "1"})
    with pytest.raises(ConfigError, match="mask.p"):
        load_config(overrides={"mask.p": "0"})
    with pytest.raises(ConfigError, match="train.max_epochs"):
        load_config(overrides={"train.max_epochs": "2.5"})
    with pytest.raises(ConfigError, match="augment.enabled"):
        load_config(overrides={"augment.enabled": "maybe"})
    with pytest.raises(ConfigError, match="variant"):
        load_config(overrides={"variant": "C"})
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg")


def test_parse_errors():
    with pytest.raises(ConfigError, match=":2:"):
        parse_text("a = 1\nnot an assignment\n")
    with pytest.raises(ConfigError):
        parse_assignments(["novalue"])
    assert parse_assignments(["a=1", " b = x=y "]) == {"a": "1", "b": "x=y"}


def test_tuple_and_bool_coercion():
    cfg = load_config(overrides={"augment.alphas": "4, 8", "augment.keeps": "100,50",
                                 "augment.enabled": "no"})
    assert cfg.augment.alphas == (4.0, 8.0)
    assert cfg.augment.keeps == (100, 50)
    assert cfg.augment.enabled is False


def test_dump_round_trip(tmp_path):
    cfg = load_config(overrides={"variant": "A", "mask.p": "12.5", "seed": "3"})
    path = tmp_path / "resolved.cfg"
    path.write_text(cfg.dumps())
    back = load_config(path)
    assert back == cfg
    assert back.hash() == cfg.hash()


def test_hash_is_stable_and_selective():
    a = load_config()
    b = load_config(overrides={"train.lr": "0.01"})
    assert a.hash() == RunConfig().hash()
    assert len(a.hash()) == 16
    assert a.hash() != b.hash()
    # selecting upstream sections ignores downstream edits
    assert a.hash(["crop", "magnify"]) == b.hash(["crop", "magnify"])
    assert a.hash(["train"]) != b.hash(["train"])


def test_output_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("STRCN_OUTPUT_DIR", str(tmp_path))
    assert load_config().output_dir() == tmp_path
    assert load_config(overrides={"data.output_dir": "elsewhere"}).output_dir().name == "elsewhere"
