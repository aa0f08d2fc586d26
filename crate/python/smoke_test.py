"""Smoke test for the searth Python extension.

Build first with `pip install --no-build-isolation -e crates/python`.
"""

import tempfile

import searth


def main():
    frames = searth.synthetic_frames(16, 32, 4, 40, seed=2)
    assert frames[0].shape == [4, 16, 32]

    earth = searth.Model("toy", seed=1, init="random")
    planar = searth.Model("toy", seed=1, init="random", mask_mode="planar")
    x0, x1 = frames[0], frames[1]
    roll = lambda t: t.roll(2, 8)
    for model, equivariant in [(earth, True), (planar, False)]:
        a = roll(model.rollout(x0, x1, 1)[0])
        b = model.rollout(roll(x0), roll(x1), 1)[0]
        d = a.max_abs_diff(b)
        assert (d <= 1e-8) == equivariant, (model, d)
        print(f"{model.mask_mode:>6} zonal roll |diff| = {d:.2e}")

    model = searth.Model("toy", seed=0)
    losses = searth.pretrain(model, frames[:30], 20, lr=1e-3, seed=0)
    print(f"pretrain loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    _, peak = searth.finetune_rar(model, frames[:30], 2, 3, 2, batch=2, lr=1e-5)
    assert peak > 0
    print(f"relay fine-tune peak live nodes {peak}")

    forecast = model.rollout(frames[30], frames[31], 4)
    truth = frames[32:36]
    for c in range(4):
        r = searth.rmse([forecast[-1]], [truth[-1]], c)
        a = searth.acc([forecast[-1]], [truth[-1]], frames, c)
        print(f"channel {c}: rmse {r:.4f} acc {a:.3f}")

    with tempfile.TemporaryDirectory() as d:
        model.save(d, 0)
        back = searth.Model.load(d)
        assert all(back.param(n) == model.param(n) for n in model.param_names())

    blocked = searth.attention_mask(4, 4, 2, 1, "earth")
    assert len(blocked) > 0 and len(blocked) < len(searth.attention_mask(4, 4, 2, 1, "planar"))
    worst = max(e for _, e in searth.gradcheck_primitives())
    assert worst <= 1e-4, worst
    print(f"primitive gradcheck worst {worst:.2e}")
    print("ok")


if __name__ == "__main__":
    main()
