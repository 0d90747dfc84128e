"""Steer a trained model by editing its caption.

Trains on map-free left and right turns that look identical before the
prediction time, so the caption is the only hint of where the car goes.
Swapping TurnLeft for TurnRight then flips the decoded turn.

    python3 demos/caption_edit.py
"""
import numpy as np

from langtraj import synth, train
from langtraj.annotate import TOKEN_ID
from langtraj.cli import edit_rollout
from langtraj.model import ModelConfig, TrajectoryModel


def main(seed=0, steps=300):
    pair = synth.turn_pair()
    exs = synth.synth_examples([pair["turn_left_nomap"], pair["turn_right_nomap"]], 2, seed=seed, jitter=0.02)
    model = TrajectoryModel(ModelConfig(dropout=0.0), seed=seed)
    # one sample per step, so the decoder cannot hedge across both turns
    train.train(model, exs, train.TrainConfig(batch_size=4, max_steps=steps, lr=5e-3, seed=seed,
                                              epochs=10**6, n_samples=1))
    for ex in exs:
        name = "TurnLeft" if ex.example_id.startswith("turn_left") else "TurnRight"
        other = "TurnRight" if name == "TurnLeft" else "TurnLeft"
        r = edit_rollout(model, ex, [(TOKEN_ID[name], TOKEN_ID[other])], 6, seed, caption=name)
        end_o, end_e = np.asarray(r["original_trajectory"])[-1], np.asarray(r["edited_trajectory"])[-1]
        print(f"{ex.example_id:32s} {name:>9s}: lateral {r['original_lateral']:+6.2f} m  "
              f"-> {other:>9s}: {r['edited_lateral']:+6.2f} m   end {end_o.round(1)} -> {end_e.round(1)}")


if __name__ == "__main__":
    main()
