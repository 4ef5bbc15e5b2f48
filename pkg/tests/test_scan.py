import csv
import io
import math

import numpy as np
import pytest

from cowqkd.scan import (
    CSV_HEADER, MU_GRID, find_cutoff, observed_block, scan, skr_at, to_csv,
)
from cowqkd.security import SecurityParams, asymptotic_fraction
from cowqkd.system import (
    DetectorModel, FiberLink, OperatingGrid, SourceModel, SystemConfig, load_preset,
    system_stats,
)

PARAMS = SecurityParams()


def quiet_config(length_km=0.0):
    det = DetectorModel(efficiency=1.0, dcr_ref_hz=1e-300, temp_k=200.0, dead_time_s=0.0)
    return SystemConfig(
        link=FiberLink(length_km), det_data=det, det_mon=det,
        source=SourceModel(intrinsic_visibility=1.0, intrinsic_error=0.0),
        ir_efficiency=1.0, operating_grid=OperatingGrid((200.0,), (0.0,)),
    )


def test_asymptotic_consistency_noiseless():
    cfg = quiet_config()
    pt = skr_at(cfg, 0.0, 10**6, PARAMS, "asymptotic")
    st = system_stats(cfg, mu=pt.mu_opt)
    expected = st.sifted_rate_hz * asymptotic_fraction(st.q_hat, st.v_hat_input, pt.mu_opt)
    # ell is floored per block: at most one bit per block is lost
    assert expected - st.sifted_rate_hz / 10**6 <= pt.skr_bps <= expected


def test_mu_opt_within_search_range():
    pt = skr_at(load_preset("ull_200km"), 200.0, 10**6, PARAMS, "new")
    assert MU_GRID[0] - 0.01 <= pt.mu_opt <= MU_GRID[-1] + 0.01
    assert 0 < pt.beta_opt <= PARAMS.beta_max


def test_bound_ordering_at_one_point():
    cfg = load_preset("ull_307km").with_visibility(0.98)
    rates = {k: skr_at(cfg, 250.0, 10**6, PARAMS, k).skr_bps
             for k in ("asymptotic", "new", "baseline")}
    assert rates["asymptotic"] >= rates["new"] >= rates["baseline"] > 0


def test_rate_decreases_with_distance():
    cfg = load_preset("ull_307km")
    rows = scan(cfg, [100.0, 150.0, 200.0, 250.0], [10**6], PARAMS, "new")
    rates = [r.skr_bps for r in rows]
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_larger_block_helps():
    cfg = load_preset("ull_307km")
    small, large = scan(cfg, [250.0], [10**5, 10**7], PARAMS, "new")
    assert large.skr_bps > small.skr_bps


def test_scan_rows_and_csv_schema():
    rows = scan(load_preset("ull_104km"), [50.0, 104.0], [10**5, 10**6], PARAMS, "new")
    assert [(r.distance_km, r.n_cpp) for r in rows] == \
        [(50.0, 10**5), (50.0, 10**6), (104.0, 10**5), (104.0, 10**6)]
    parsed = list(csv.reader(io.StringIO(to_csv(rows))))
    assert tuple(parsed[0]) == CSV_HEADER
    assert len(parsed) == 5 and all(len(r) == len(CSV_HEADER) for r in parsed)
    assert float(parsed[1][8]) == pytest.approx(8.0)  # dead time column in microseconds


def test_scan_is_deterministic():
    cfg = load_preset("ull_200km")
    a = to_csv(scan(cfg, [150.0, 200.0], [10**6], PARAMS, "baseline"))
    b = to_csv(scan(cfg, [150.0, 200.0], [10**6], PARAMS, "baseline"))
    assert a == b


def test_scan_reports_bad_points_without_raising():
    rows = scan(load_preset("ull_104km"), [100.0], [10], PARAMS, "new")
    assert rows[0].ell == 0 and "n_cpp" in rows[0].reason


def test_skr_at_input_checks():
    cfg = load_preset("ull_104km")
    with pytest.raises(ValueError):
        skr_at(cfg, 100.0, 10**6, PARAMS, "other")
    with pytest.raises(ValueError):
        skr_at(cfg, -1.0, 10**6, PARAMS, "new")


def test_beyond_reach_is_zero():
    pt = skr_at(load_preset("ull_307km"), 600.0, 10**5, PARAMS, "new")
    assert pt.ell == 0 and pt.skr_bps == 0.0 and pt.reason


def test_observed_block_fields():
    cfg = load_preset("ull_307km")
    b = observed_block(cfg, cfg.source.mu, 660_000)
    st = system_stats(cfg)
    assert b.n_vis == round(660_000 * st.n_vis_rate_hz / st.sifted_rate_hz)
    assert b.m_ir == math.ceil(cfg.ir_efficiency * 660_000 *
                               float(-st.q_raw * np.log2(st.q_raw)
                                     - (1 - st.q_raw) * np.log2(1 - st.q_raw)))


def test_cutoff_noiseless_reaches_scan_limit():
    assert find_cutoff(quiet_config(), 10**6, PARAMS, "asymptotic", max_distance_km=50.0) == 50.0


def test_cutoff_ordering_small_block():
    cfg = load_preset("ull_307km")
    new = find_cutoff(cfg, 10**5, PARAMS, "new", resolution_km=2.0, min_distance_km=200.0)
    base = find_cutoff(cfg, 10**5, PARAMS, "baseline", resolution_km=2.0,
                       min_distance_km=200.0)
    asym = find_cutoff(cfg, 10**5, PARAMS, "asymptotic", resolution_km=2.0,
                       min_distance_km=200.0)
    assert asym >= new > base
