"""Per-dataset settings of the attention network experiments."""

from dataclasses import dataclass

from .engine import TrainingConfig
from .netspec import NetworkConfig
from .traces import LeakageModelSpec


@dataclass
class DatasetPreset:
    name: str
    network: NetworkConfig
    training: TrainingConfig
    leakage_model: LeakageModelSpec
    n_profiling: int
    n_attack: int

    def to_dict(self):
        return {
            "name": self.name,
            "network": self.network.to_dict(),
            "training": self.training.to_dict(),
            "leakage_model": self.leakage_model.to_dict(),
            "n_profiling": self.n_profiling,
            "n_attack": self.n_attack,
        }


PRESET_NAMES = ("dpav4", "aes_rd", "aes_hd", "ascad")


def dataset_preset(name: str) -> DatasetPreset:
    if name == "dpav4":
        return DatasetPreset(
            name,
            NetworkConfig(input_length=1000, filters_per_block=(128, 256, 512), fc_hidden_units=1024),
            TrainingConfig(epochs=60, batch_size=200, learning_rate=1e-4),
            LeakageModelSpec.sbox_xor_mask(byte_index=1),
            n_profiling=5000,
            n_attack=5000,
        )
    if name == "aes_rd":
        return DatasetPreset(
            name,
            NetworkConfig(input_length=3500, filters_per_block=(64, 64, 128, 128, 256), fc_hidden_units=1024,
                          dropout_rates=(0.2, 0.2)),
            TrainingConfig(epochs=101, batch_size=256, learning_rate=1e-4, grad_clip=1.0),
            LeakageModelSpec.sbox(byte_index=1),
            n_profiling=40000,
            n_attack=10000,
        )
    if name == "aes_hd":
        return DatasetPreset(
            name,
            NetworkConfig(input_length=1250, filters_per_block=(128, 256, 512), fc_hidden_units=1024),
            TrainingConfig(epochs=75, batch_size=200, learning_rate=1e-4),
            LeakageModelSpec.last_round_hd(i1=12, i2=8),
            n_profiling=50000,
            n_attack=25000,
        )
    if name == "ascad":
        return DatasetPreset(
            name,
            NetworkConfig(input_length=700, filters_per_block=(128, 256, 512), fc_hidden_units=4096),
            TrainingConfig(epochs=75, batch_size=200, learning_rate=1e-4),
            LeakageModelSpec.sbox(byte_index=3),
            n_profiling=50000,
            n_attack=10000,
        )
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
