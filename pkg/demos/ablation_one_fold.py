"""Train one leave-one-person-out fold with and without the gazemap loss.

    python3 demos/ablation_one_fold.py [HELD_OUT_PERSON] [SEED]

A single slice of the desk-scale ablation run by the acceptance suite: ten
persons of 300 samples, desk presets, about ten minutes on one core.  One
fold is noisy; the acceptance suite averages five folds over three seeds.
"""
import sys
import tempfile

import numpy as np

from gazenet.geometry import angular_error_deg
from gazenet.models import get_preset
from gazenet.synth import SynthConfig, generate_dataset
from gazenet.training import get_train_preset, train_fold

person = int(sys.argv[1]) if len(sys.argv) > 1 else 0
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

with tempfile.TemporaryDirectory() as tmp:
    ds = generate_dataset(SynthConfig(seed=0, persons=10, samples_per_person=300), tmp)
    test = ds.select_persons([person])
    rest = ds.select_persons([p for p in ds.person_ids if p != person])

    guess = np.broadcast_to(rest.gaze.mean(axis=0), test.gaze.shape)
    print(f"constant mean-label predictor: {np.mean(angular_error_deg(guess, test.gaze)):.2f} deg")

    for supervised in (True, False):
        cfg = get_train_preset("desk").replace(seed=seed, gazemap_supervision=supervised)
        res, _ = train_fold(rest, test, get_preset("desk"), cfg)
        print(f"gazemap loss {'on ' if supervised else 'off'}: {res.mean_error:.2f} deg ({res.seconds:.0f} s)")
