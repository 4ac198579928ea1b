"""Desk-scale meta-action driving: a 2D closed-loop simulator, a factorised
speed/path decision policy with a latent trajectory decoder, imitation
pretraining and KL-regularised PPO fine-tuning with sparse rewards."""

__version__ = "0.1.0"
