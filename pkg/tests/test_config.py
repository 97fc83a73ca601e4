import pytest

from cttp import __version__, config as C


def write(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    return p


def test_defaults_without_sources():
    cfg = C.load_config(env={})
    assert cfg == C.DEFAULTS
    assert cfg is not C.DEFAULTS and cfg["pretrain"] is not C.DEFAULTS["pretrain"]


def test_precedence_file_env_flags(tmp_path):
    path = write(tmp_path, "[pretrain]\nepochs = 5\nbatch_size = 64\nlr = 0.001\n")
    env = {"CTTP_PRETRAIN_EPOCHS": "7", "CTTP_PRETRAIN_LR": "0.002", "HOME": "/x"}
    cfg = C.load_config(path, {"pretrain.epochs": 9, "pretrain.batch_size": None}, env=env)
    assert cfg["pretrain"]["epochs"] == 9        # flag beats env and file
    assert cfg["pretrain"]["lr"] == 0.002        # env beats file
    assert cfg["pretrain"]["batch_size"] == 64   # unset flag falls through
    assert cfg["pretrain"]["tau"] == 0.2         # default


def test_multiword_keys_from_env():
    cfg = C.load_config(env={"CTTP_DATASET_PRETRAIN_PER_TOOL": "3", "CTTP_EVAL_TRAIN_SENSOR": "gel"})
    assert cfg["dataset"]["pretrain_per_tool"] == 3
    assert cfg["eval"]["train_sensor"] == "gel"


@pytest.mark.parametrize("text", ["[pretrain]\nepoch = 3\n", "[optimizer]\nlr = 1\n",
                                  "[pretrain]\nepochs = three\n", "[pretrain]\ntied = maybe\n",
                                  "no section header\n"])
def test_bad_files(tmp_path, text):
    with pytest.raises(C.ConfigError):
        C.load_config(write(tmp_path, text), env={})


def test_bad_env_and_flag_keys(tmp_path):
    with pytest.raises(C.ConfigError, match="environment"):
        C.load_config(env={"CTTP_PRETRAIN_EPOCHZ": "1"})
    with pytest.raises(C.ConfigError, match="command line"):
        C.load_config(overrides={"probes.lr": 1.0}, env={})
    with pytest.raises(C.ConfigError, match="not found"):
        C.load_config(tmp_path / "missing.ini", env={})


@pytest.mark.parametrize("raw,want", [("yes", True), ("0", False), ("On", True), ("false", False)])
def test_boolean_coercion(raw, want):
    assert C.load_config(env={"CTTP_PRETRAIN_TIED": raw})["pretrain"]["tied"] is want


def test_resolved_ini_round_trips(tmp_path):
    cfg = C.load_config(overrides={"pretrain.lr": 1e-4, "pretrain.symmetric": False}, env={})
    path = C.write_resolved(cfg, tmp_path)
    text = path.read_text()
    assert text.splitlines()[0] == f"# cttp {__version__} resolved configuration"
    assert C.load_config(path, env={}) == cfg


@pytest.mark.parametrize("text,want", [("8,32,128,256", [8, 32, 128, 256]), (" 16 , 2", [16, 2])])
def test_parse_sizes(text, want):
    assert C.parse_sizes(text) == want


@pytest.mark.parametrize("text", ["128,", "", "8,x", "1,8", "-4", "0"])
def test_parse_sizes_rejects(text):
    with pytest.raises(C.ConfigError):
        C.parse_sizes(text)


def test_typed_views():
    cfg = C.load_config(overrides={"model.backbone_dim": 32, "probes.scaling": "per-dim"}, env={})
    p = C.pretrain_config(cfg, mode="recon")
    assert p.mode == "recon" and p.backbone_dim == 32 and p.batch_size == 128
    assert C.probe_config(cfg).scaling == "per-dim"
    assert C.dataset_config(cfg).pretrain_per_tool == 200
    assert C.tolerances(cfg) == (3.0, 3.0, 5.0)


def test_typed_view_errors_become_config_errors():
    with pytest.raises(C.ConfigError):
        C.pretrain_config(C.load_config(env={}), mode="simclr")
    with pytest.raises(C.ConfigError):
        C.probe_config(C.load_config(overrides={"probes.scaling": "whiten"}, env={}))


def test_readme_style_inline_comments(tmp_path):
    cfg = C.load_config(write(tmp_path, "[dataset]\npretrain_per_tool = 20   ; 9 tools\n[probes]\nscaling = none # raw\n"), env={})
    assert cfg["dataset"]["pretrain_per_tool"] == 20 and cfg["probes"]["scaling"] == "none"
