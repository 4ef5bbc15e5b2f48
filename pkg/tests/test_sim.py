import math
from dataclasses import replace

import numpy as np
import pytest

from cowqkd.sim import (
    BIT0, BIT1, LINE_DATA, LINE_MONITOR, TEST, DetectionRecords, SiftedBlock, alice_generate,
    dark_corrected, model_agreement, sift, transmit_detect, visibility_estimate,
)
from cowqkd.system import (
    DetectorModel, FiberLink, SourceModel, SystemConfig, load_preset, system_stats,
)


def toy_config(**kw):
    """Lossless, dark-free link with near-certain detection."""
    det = DetectorModel(efficiency=1.0, dcr_ref_hz=1e-300, temp_k=200.0, dead_time_s=0.0)
    src = dict(mu=50.0, decoy_prob=0.155, intrinsic_visibility=1.0, intrinsic_error=0.0)
    src.update(kw)
    return SystemConfig(link=FiberLink(0.0), det_data=det, det_mon=det, source=SourceModel(**src))


def darks_only_config():
    cfg = load_preset("desk_25db")
    det = replace(cfg.det_data, temp_k=223.0, dcr_ref_hz=1e7)
    return replace(cfg, link=FiberLink(0.0, extra_loss_db=400.0), det_data=det, det_mon=det)


def run(cfg, n, seed):
    s1, s2, s3 = np.random.SeedSequence(seed).spawn(3)
    stream = alice_generate(n, cfg.source.decoy_prob, s1)
    records = transmit_detect(stream, cfg, s2)
    return stream, records, sift(records, stream, s3)


def test_alice_decoy_fraction_extremes():
    assert not np.any(alice_generate(1000, 0.0, 1).kinds == TEST)
    assert np.all(alice_generate(1000, 1.0, 1).kinds == TEST)


def test_alice_decoy_fraction_statistics():
    n, f = 10**6, 0.155
    kinds = alice_generate(n, f, 2).kinds
    frac = np.mean(kinds == TEST)
    assert abs(frac - f) <= 3 * math.sqrt(f * (1 - f) / n)
    bits = kinds[kinds != TEST]
    assert abs(np.mean(bits == BIT1) - 0.5) <= 3 * math.sqrt(0.25 / len(bits))


def test_alice_symbol_access():
    stream = alice_generate(10, 0.5, 3)
    assert stream[4].slot_index == 4
    assert stream[4].kind in ("bit0", "bit1", "test")
    with pytest.raises(ValueError):
        alice_generate(0, 0.1, 1)


def test_occupancy_and_monitor_bins():
    from cowqkd.sim import SymbolStream
    s = SymbolStream(np.array([BIT1, BIT0, TEST], np.int8))
    assert s.occupancy().tolist() == [[True, False], [False, True], [True, True]]
    both, single = s.monitor_bin_classes()
    # half-slots: 1 0 | 0 1 | 1 1
    assert both.tolist() == [False, False, False, False, True, True]
    assert single.tolist() == [True, True, False, True, False, False]


def test_empty_link_gives_no_records():
    cfg = toy_config()
    cfg = replace(cfg, link=FiberLink(0.0, extra_loss_db=2000.0))
    stream = alice_generate(10_000, 0.155, 1)
    assert len(transmit_detect(stream, cfg, 2)) == 0


def test_perfect_interference_has_no_destructive_clicks():
    stream, records, blk = run(toy_config(), 20_000, 4)
    both, _ = stream.monitor_bin_classes()
    assert not both[records.line_slots(LINE_MONITOR)].any()
    assert blk.v_obs == 1.0


def test_noiseless_toy_keys_match():
    _, _, blk = run(toy_config(), 20_000, 5)
    assert blk.n_cpp > 0.8 * 20_000 * (1 - 0.155)
    assert np.array_equal(blk.alice_bits, blk.bob_bits)


def test_bit_mapping():
    from cowqkd.sim import SymbolStream
    stream = SymbolStream(np.array([BIT1, BIT0], np.int8))
    rec = DetectionRecords(np.array([0, 3]), np.array([LINE_DATA, LINE_DATA], np.int8),
                           np.zeros(2, np.int8), 2, 1e9)
    blk = sift(rec, stream)
    assert blk.bob_bits.tolist() == [1, 0] and blk.alice_bits.tolist() == [1, 0]


def test_sift_rejects_foreign_slots():
    stream = alice_generate(4, 0.0, 1)
    rec = DetectionRecords(np.array([8]), np.array([LINE_DATA], np.int8),
                           np.zeros(1, np.int8), 4, 1e9)
    with pytest.raises(ValueError):
        sift(rec, stream)


def test_darks_only_error_rate_is_one_half():
    _, _, blk = run(darks_only_config(), 10**6, 6)
    assert blk.n_cpp > 1000
    q = blk.raw_errors / blk.n_cpp
    assert abs(q - 0.5) <= 3 * math.sqrt(0.25 / blk.n_cpp)


def test_determinism():
    cfg = load_preset("desk_25db")
    a = run(cfg, 200_000, 7)
    b = run(cfg, 200_000, 7)
    assert a[1] == b[1]
    assert np.array_equal(a[2].bob_bits, b[2].bob_bits)


def test_cause_labels_do_not_affect_sifting():
    cfg = load_preset("desk_25db")
    stream, records, blk = run(cfg, 200_000, 8)
    rng = np.random.default_rng(0)
    shuffled = replace(records, cause=rng.permutation(records.cause))
    again = sift(shuffled, stream, np.random.SeedSequence(8).spawn(3)[2])
    assert np.array_equal(again.bob_bits, blk.bob_bits) and again.v_obs == blk.v_obs


def test_dead_time_spacing():
    cfg = load_preset("ull_104km").at_distance(0.0)
    _, records, _ = run(cfg, 200_000, 9)
    gap = cfg.det_data.dead_time_s * 2 * cfg.source.rep_rate_hz
    for line in (LINE_DATA, LINE_MONITOR):
        slots = records.line_slots(line)
        assert len(slots) > 1 and np.all(np.diff(slots) >= gap)


def test_afterpulses_are_recorded():
    cfg = load_preset("ull_104km").at_distance(0.0)
    det = replace(cfg.det_data, afterpulse_coeff=0.5)
    cfg = replace(cfg, det_data=det)
    _, records, _ = run(cfg, 200_000, 10)
    assert any(r.cause == "afterpulse" for r in records)


def test_records_csv():
    _, records, _ = run(load_preset("desk_25db"), 100_000, 11)
    text = records.to_csv().splitlines()
    assert text[0] == "slot,line,cause" and len(text) == len(records) + 1


def test_sifted_block_save_load(tmp_path):
    _, _, blk = run(load_preset("desk_25db"), 100_000, 12)
    path = tmp_path / "blk.npz"
    blk.save(path)
    back = SiftedBlock.load(path)
    assert np.array_equal(back.bob_bits, blk.bob_bits)
    assert (back.n_vis, back.v_obs, back.duration_s) == (blk.n_vis, blk.v_obs, blk.duration_s)


def test_visibility_estimate_formula():
    assert visibility_estimate(10, 1000, 100, 1000) == pytest.approx(0.95)
    assert visibility_estimate(0, 0, 0, 0) == 0.0


@pytest.mark.slow
def test_model_agreement_with_many_symbols():
    cfg = load_preset("desk_25db")
    _, _, blk = run(cfg, 2 * 10**7, 13)
    agree = model_agreement(blk, cfg)
    for key in ("sifted", "errors", "mon_int", "mon_single"):
        assert agree[key]["z"] < 3.0, (key, agree[key])


@pytest.mark.slow
def test_dark_corrected_visibility_converges():
    """Simulated V with darks removed approaches the intrinsic value."""
    cfg = load_preset("ull_104km").with_visibility(0.9)
    errs = []
    for n in (10**5, 10**7):
        _, _, blk = run(cfg, n, 14)
        errs.append(abs(dark_corrected(blk, cfg)[1] - system_stats(cfg).v_hat_input))
    assert errs[1] < 0.05
    assert errs[1] <= errs[0] + 1e-12


@pytest.mark.slow
def test_200km_block_statistics():
    """Ten blocks at 200 km: pooled Q and dark-corrected V within 3 sigma of 1.55 % / 97.7 %."""
    cfg = load_preset("ull_200km")
    st = system_stats(cfg)
    sifted = errors = int_clicks = int_bins = single_clicks = single_bins = 0
    for seed in range(10):
        _, _, blk = run(cfg, 10**7, 100 + seed)
        sifted += blk.n_cpp
        errors += blk.raw_errors
        int_clicks += blk.mon_int_clicks
        int_bins += blk.mon_int_bins
        single_clicks += blk.mon_single_clicks
        single_bins += blk.mon_single_bins
    q = errors / sifted
    assert abs(q - 0.0155) <= 3 * math.sqrt(0.0155 * 0.9845 / sifted)
    # dark-corrected visibility from pooled counts; sigma by error propagation
    d_m = st.p_dark_mon * st.live_mon
    p_int, p_single = int_clicks / int_bins, single_clicks / single_bins
    v = 1.0 - (p_int - d_m) / (2.0 * (p_single - d_m))
    s_int = math.sqrt(max(st.p_int, 1e-300) / int_bins)
    s_single = math.sqrt(st.p_single / single_bins)
    sigma = math.hypot(s_int / (2 * (p_single - d_m)),
                       (p_int - d_m) * s_single / (2 * (p_single - d_m) ** 2))
    assert abs(v - 0.977) <= 3 * sigma
