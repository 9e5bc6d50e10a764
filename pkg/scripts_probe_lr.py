import time

import facevis
from facevis.network import TrainConfig, default_block_config, train_toy

m = facevis.generate_synthetic_model(0, q_target=400, n_id=8, n_exp=4)


def run(tag, n_train=200, yaw=90.0, epochs=30, lr=2e-5, batch=16, dropout=0.3,
        drops=(0.5, 0.8), factor=0.25, seed=0, blocks=2, divisor=4, size=32,
        fc_hidden=0, sigma=1.0, radius=2, mask="standard"):
    train = facevis.generate_synthetic_dataset(m, 10 + seed, n_train, size,
                                               max_yaw_deg=yaw)
    val = facevis.generate_synthetic_dataset(m, 1100 + seed, 60, size,
                                             max_yaw_deg=yaw)
    cfg = default_block_config(m, n_blocks=blocks, image_size=size,
                               dropout_rate=dropout, scale_divisor=divisor,
                               fc_hidden=fc_hidden, sigma=sigma,
                               support_radius=radius, mask_kind=mask)
    hyper = TrainConfig(epochs=epochs, lr=lr, batch_size=batch, seed=seed,
                        lr_drops=drops, lr_drop_factor=factor)
    t0 = time.time()
    net, hist = train_toy(m, train, val, cfg, hyper)
    ep18 = [r for r in hist if r["epoch"] == 17]
    final = [r for r in hist if r["epoch"] == epochs - 1]
    print("%s ep17 %s FINAL %s  (%.0fs)"
          % (tag, ["%.2f" % r["nme"] for r in ep18],
             ["%.2f" % r["nme"] for r in final], time.time() - t0))


run("fc128   ", fc_hidden=128)
run("sig15   ", sigma=1.5, radius=3)
run("do20    ", dropout=0.2)
run("none_s0 ", mask="none")
run("fc128s15", fc_hidden=128, sigma=1.5, radius=3)
