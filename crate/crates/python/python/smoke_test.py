"""Exercises the extension module end to end on a tiny run."""

import math
import tempfile

import shardtrain_py as st

SMALL = """{
  "width_divisor": 28,
  "head_dims": [8],
  "world_size": 2,
  "batch_per_rank": 3,
  "total_iters": 8,
  "swav": {"n_prototypes": 6},
  "dataset": {"dim": 10, "n_samples": 64},
  "optim": {"warmup_iters": 2}
}"""


def main():
    assert st.named_widths("rg-128gf") == ([528, 1056, 2904, 7392], [2, 7, 17, 1])
    assert st.schedule_lr(5500, 0.15, 9.3, 0.0093, 5500, 126000) == 9.3

    plan = st.plan_checkpoints([4, 4, 4, 4, 4, 4], n_segments=3)
    assert plan.boundaries == [2, 4] and plan.minimax_sum == 8

    assert st.simulate_schedule([1, 1, 1], [2, 2, 2], prefetch=False) == 9.0
    assert st.simulate_schedule([1, 1, 1], [2, 2, 2]) == 7.0

    q = st.sinkhorn([[0.1, 0.2, 0.0], [0.0, 0.3, 0.1]])
    for col in zip(*q):
        assert abs(sum(col) - 1 / 3) < 1e-15

    cfg = st.RunConfig(SMALL)
    assert cfg.world_size == 2 and len(cfg.layer_dims) == 6
    try:
        st.RunConfig('{"world_sise": 2}')
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    with tempfile.TemporaryDirectory() as tmp:
        metrics = st.train(cfg, slices_dir=tmp + "/slices")
        assert [m.iter for m in metrics] == list(range(8))
        assert all(math.isfinite(m.loss) for m in metrics)
        assert [m.loss for m in st.train(cfg)] == [m.loss for m in metrics]
        top1 = st.linear_probe(cfg, tmp + "/slices")
        assert 0.0 <= top1 <= 1.0
    print("smoke test ok:", metrics[-1], "probe top1", top1)


if __name__ == "__main__":
    main()
