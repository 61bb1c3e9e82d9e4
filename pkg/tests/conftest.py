import http.server
import threading

import numpy as np
import pandas as pd
import pytest

from varrecal.market_data import AssetSeries, merge_vix
from varrecal.state_model import prepare_panel
from varrecal.synth import SynthConfig, bars_needed, synth_generate, synth_to_merged


def make_series(closes, asset="TST", vix=None, spread=0.01, volume=None, start="2020-01-01"):
    """Bars around a close path: open = previous close, symmetric range."""
    c = np.asarray(closes, dtype=float)
    o = np.concatenate([[c[0]], c[:-1]])
    h = np.maximum(o, c) * (1 + spread)
    lo = np.minimum(o, c) * (1 - spread)
    n = c.size
    vol = np.full(n, 1e6) if volume is None else np.asarray(volume, dtype=float)
    dates = pd.bdate_range(start, periods=n)
    frame = pd.DataFrame({"date": dates, "open": o, "high": h, "low": lo, "close": c, "volume": vol})
    s = AssetSeries(asset, frame)
    if vix is not None:
        v = np.broadcast_to(np.asarray(vix, dtype=float), (n,))
        s = merge_vix(s, pd.DataFrame({"date": dates, "vix": v}))
    return s


@pytest.fixture(scope="session")
def synth_series():
    """One regime-switching asset long enough for 18 origins."""
    return synth_to_merged(synth_generate(SynthConfig(n_assets=1, length=bars_needed(900)), 11))[0]


@pytest.fixture(scope="session")
def synth_panel(synth_series):
    return prepare_panel(synth_series)


class _Handler(http.server.BaseHTTPRequestHandler):
    body = b""
    status = 200

    def do_GET(self):  # noqa: N802
        self.send_response(self.status)
        self.end_headers()
        self.wfile.write(self.body)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    handler = type("H", (_Handler,), {})
    srv = http.server.HTTPServer(("127.0.0.1", 0), handler)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield handler, f"http://127.0.0.1:{srv.server_address[1]}/{{symbol}}.csv"
    srv.shutdown()


# acceptance verdict lines, echoed at the end of the session so they appear
# in plain `pytest -v` output without -s
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
