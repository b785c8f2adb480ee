"""
Train a small model and explain one prediction
==============================================

A few epochs on a tiny synthetic set are enough to see the loss fall.  The
trained tumor head is then explained in terms of the nine descriptor heads.
The numbers here are a smoke run; the acceptance suite does the full
cross-validated training.
"""

import numpy as np

from mtbirads import explain as E
from mtbirads import model as M
from mtbirads import synthdata as SD
from mtbirads import trainer as T

samples = SD.generate(SD.SynthSpec(n_samples=24, image_size=64, rng_seed=1))
train, val, test = SD.holdout_split(samples, seed=0)
cfg = M.ModelConfig(input_size=64, blocks=3, base_channels=8)
tc = T.TrainConfig(max_epochs=8)

state = T.train(M.init(cfg, 0), [samples[i] for i in train], [samples[i] for i in val], cfg, tc,
                on_epoch=lambda r: print(f"epoch {r['epoch']:2d}  train {r['train_loss']:.3f}  val {r['val_loss']:.3f}"))
report = T.evaluate(state.params, [samples[i] for i in test], cfg)
print(report.to_json())

###############################################################################
# Attribution
# -----------
# The baseline is the mean descriptor vector over the training images.  Each
# head's contribution is exact (512 coalitions) and they sum to the change
# in malignant probability.

feats = M.predict(state.params, np.stack([samples[i].image for i in train]), cfg)["features"]
baseline = E.baseline_from_reference(feats)
s = samples[test[0]]
rep = E.explain(state.params, cfg, s.image, baseline, mode="group", sample_id=s.name)
print(s.name, "true class", s.tumor, "margin", s.labels.margin)
print(E.render_text_bars(rep))
