from dataclasses import replace

import numpy as np

from cowqkd.pipeline import aggregate, block_seeds, ir_block_size, run_block, run_blocks
from cowqkd.security import SecurityParams
from cowqkd.system import DetectorModel, FiberLink, SourceModel, SystemConfig, load_preset

PARAMS = SecurityParams()


def toy_config():
    det = DetectorModel(efficiency=1.0, dcr_ref_hz=1e-300, temp_k=200.0, dead_time_s=0.0)
    return SystemConfig(
        link=FiberLink(0.0), det_data=det, det_mon=det,
        source=SourceModel(mu=0.05, intrinsic_visibility=1.0, intrinsic_error=0.0),
        name="toy",
    )


def test_ir_block_size():
    assert ir_block_size(10) == 1024
    assert ir_block_size(10**6) == 10**4


def test_noiseless_blocks_yield_identical_keys():
    results = run_blocks(toy_config(), PARAMS, 2, 10**6, 0)
    for r in results:
        assert r.verified and r.q_hat == 0.0 and r.ell > 0
        assert np.array_equal(r.key_alice, r.key_bob)
    assert aggregate(results)["blocks_with_key"] == 2


def test_noisy_blocks_reconcile_and_compress():
    # lossless link at mu = 0.1: about 6e4 sifted bits, enough for a positive key
    cfg = replace(load_preset("desk_25db"), link=FiberLink(0.0)).with_mu(0.1)
    r = run_block(cfg, PARAMS, 4 * 10**6, block_seeds(1, 1)[0])
    assert r.verified and r.reconciled_match
    assert 0.0 < r.q_raw < 0.05
    assert r.ell > 0 and np.array_equal(r.key_alice, r.key_bob)


def test_blocks_are_independent_of_order():
    cfg = load_preset("desk_25db")
    seeds = block_seeds(5, 3)
    forward = [run_block(cfg, PARAMS, 200_000, s, i) for i, s in enumerate(seeds)]
    backward = [run_block(cfg, PARAMS, 200_000, seeds[i], i) for i in (2, 1, 0)][::-1]
    alone = run_block(cfg, PARAMS, 200_000, block_seeds(5, 3)[1], 1)
    assert alone.stats_dict() == forward[1].stats_dict()
    assert [r.stats_dict() for r in forward] == [r.stats_dict() for r in backward]


def test_aggregate_rate():
    results = run_blocks(toy_config(), PARAMS, 1, 10**6, 3)
    agg = aggregate(results)
    assert agg["skr_bps"] == results[0].ell / results[0].duration_s
