"""
Learning the source model
=========================

Replace the hand-made Laplace weights by a small gated convolutional network
and train it end to end through unrolled AuxIVA-ISS iterations.  The data is
a few dozen convolutive toy mixtures, so this runs in a couple of minutes.
"""

import numpy as np

from surrogate_iva import mixsim
from surrogate_iva import train as tr
from surrogate_iva.stft import StftConfig

spec = mixsim.MixtureSpec(n_sources=2, mixing="convolutive", duration_s=1.0, seed=11)
cfg = StftConfig(512)


def samples(start, stop):
    out = []
    for i in range(start, stop):
        x, refs, _ = mixsim.make_item(spec, i)
        out.append(tr.prepare(x, refs, cfg))
    return out


train_set, val_set, test_set = samples(0, 40), samples(40, 48), samples(48, 60)

# reference point: the classical Laplace prior
laplace = np.median(tr.evaluate_sisdr("laplace", test_set, cfg, 20))
print(f"Laplace + ISS test median SI-SDR: {laplace:.2f} dB")

# a narrow network and a large step size keep the demo short
config = tr.TrainConfig(frame_size=512, hidden=32, learning_rate=1e-2, batch_size=4, max_epochs=6)
net, log = tr.train_samples(train_set, val_set, config)
for rec in log:
    if rec["split"] == "val":
        print(f"epoch {rec['epoch']}: validation SI-SDR {rec['value']:.2f} dB")

learned = np.median(tr.evaluate_sisdr(net, test_set, cfg, 20))
print(f"GLU + ISS test median SI-SDR: {learned:.2f} dB")
