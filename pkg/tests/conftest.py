import pytest
import torch

from eofm.backbone import Encoder, EncoderConfig, default_modalities
from eofm.encodings import EncodingRangeRegistry

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def desk_mods():
    return default_modalities("desk")


@pytest.fixture
def tiny_encoder():
    torch.manual_seed(0)
    return Encoder(EncoderConfig(), EncodingRangeRegistry())


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion; the runtime bound is checked in fixture teardown."""
    status: dict[str, dict] = {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            props = dict(getattr(rep, "user_properties", []) or [])
            if "criterion" not in props or getattr(rep, "when", None) not in ("setup", "call", "teardown"):
                continue
            entry = status.setdefault(props["criterion"], {"ok": True, "duration": 0.0, "ran": False})
            entry["ok"] &= not rep.failed
            entry["ran"] |= rep.when == "call"
            if rep.when == "call":
                entry["duration"] = rep.duration
    if status:
        terminalreporter.section("acceptance criteria")
        for label in sorted(status, key=lambda s: int(s.split()[1].rstrip(":"))):
            e = status[label]
            verdict = "PASS" if e["ok"] and e["ran"] else "FAIL"
            terminalreporter.write_line(f"{label}: {verdict} ({e['duration']:.1f}s)")
