"""Shared desk-scale run: the default benchmark generated, pretrained and evaluated once per session."""
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str):
    line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE[number] = line
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])


@dataclass
class DeskRun:
    root: Path
    data: Path
    data_twin: Path
    ckpts: dict
    cttp_twin: Path
    report: dict
    sweep: dict
    results: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    @property
    def pipeline_seconds(self):
        return sum(self.seconds[k] for k in ("gen", "pretrain", "eval", "sweep"))


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Default config throughout; CTTP via the CLI twice, baselines via the library (heads kept)."""
    from cttp import cli, config as C, dataio, pretrain as P

    saved = {k: os.environ.pop(k) for k in list(os.environ) if k.startswith(C.ENV_PREFIX)}
    try:
        root = tmp_path_factory.mktemp("desk")
        cfg = C.load_config(env={})
        sec = {}

        t0 = time.perf_counter()
        assert cli.main(["gen", "--out", str(root / "data")]) == 0
        sec["gen"] = time.perf_counter() - t0
        assert cli.main(["gen", "--out", str(root / "data_twin")]) == 0

        ckpts, results = {}, {}
        t0 = time.perf_counter()
        assert cli.main(["pretrain", "--mode", "cttp", "--data", str(root / "data"),
                         "--out", str(root / "ckpt" / "cttp")]) == 0
        ckpts["cttp"] = root / "ckpt" / "cttp" / "model.ckpt"
        split = dataio.load_dataset(root / "data", ["pretrain"])["pretrain"]
        for mode in P.BASELINE_MODES:
            res = P.pretrain(C.pretrain_config(cfg, mode), split)
            out = root / "ckpt" / mode
            out.mkdir(parents=True)
            dataio.save_checkpoint(res.checkpoint(), out / "model.ckpt")
            ckpts[mode], results[mode] = out / "model.ckpt", res
        sec["pretrain"] = time.perf_counter() - t0

        assert cli.main(["pretrain", "--mode", "cttp", "--data", str(root / "data_twin"),
                         "--out", str(root / "ckpt_twin")]) == 0

        t0 = time.perf_counter()
        assert cli.main(["eval", "--data", str(root / "data"), "--report", str(root / "report.json"),
                         "--ckpt", *[f"{m}={p}" for m, p in ckpts.items()]]) == 0
        sec["eval"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        assert cli.main(["sweep", "--sizes", "8,32,128,256", "--data", str(root / "data"),
                         "--out", str(root / "sweep")]) == 0
        sec["sweep"] = time.perf_counter() - t0

        run = DeskRun(root, root / "data", root / "data_twin", ckpts, root / "ckpt_twin" / "model.ckpt",
                      json.loads((root / "report.json").read_text()),
                      json.loads((root / "sweep" / "sweep.json").read_text()), results, sec)
        print("desk run timings (s): " + ", ".join(f"{k} {v:.0f}" for k, v in sec.items()), flush=True)
        yield run
    finally:
        os.environ.update(saved)
