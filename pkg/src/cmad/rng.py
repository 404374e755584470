"""Named deterministic random streams.

One root seed fans out into independent streams (data order, pseudo-anomaly
synthesis, diffusion noise, parameter init) so that disabling one component
never shifts the draws seen by another.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

STREAM_NAMES = ("data_order", "pseudo_anomaly", "diffusion", "init")


def derive_seed(root_seed: int, name: str) -> int:
    """Stable 63-bit seed for a named stream under a root seed."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFFFFFFFFFFFFFF


class RngStreams:
    """Holds one generator per named stream.

    numpy generators back data-facing streams (shuffles, per-sample seeds);
    torch generators back tensor-valued draws (init, diffusion noise).
    """

    def __init__(self, root_seed: int):
        self.root_seed = root_seed
        self.data_order = np.random.Generator(np.random.PCG64(derive_seed(root_seed, "data_order")))
        self.pseudo_anomaly = np.random.Generator(
            np.random.PCG64(derive_seed(root_seed, "pseudo_anomaly"))
        )
        self.diffusion = torch.Generator().manual_seed(derive_seed(root_seed, "diffusion"))
        self.init = torch.Generator().manual_seed(derive_seed(root_seed, "init"))

    def state_fingerprint(self) -> dict[str, str]:
        """Hash of each stream's internal state, for isolation checks."""
        out = {}
        for name in ("data_order", "pseudo_anomaly"):
            gen = getattr(self, name)
            blob = repr(gen.bit_generator.state).encode()
            out[name] = hashlib.sha256(blob).hexdigest()
        for name in ("diffusion", "init"):
            gen = getattr(self, name)
            out[name] = hashlib.sha256(bytes(gen.get_state().numpy().tobytes())).hexdigest()
        return out

    def state_dict(self) -> dict:
        return {
            "root_seed": self.root_seed,
            "data_order": self.data_order.bit_generator.state,
            "pseudo_anomaly": self.pseudo_anomaly.bit_generator.state,
            "diffusion": self.diffusion.get_state().numpy().tobytes(),
            "init": self.init.get_state().numpy().tobytes(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.root_seed = state["root_seed"]
        self.data_order.bit_generator.state = state["data_order"]
        self.pseudo_anomaly.bit_generator.state = state["pseudo_anomaly"]
        self.diffusion.set_state(torch.from_numpy(np.frombuffer(state["diffusion"], dtype=np.uint8).copy()))
        self.init.set_state(torch.from_numpy(np.frombuffer(state["init"], dtype=np.uint8).copy()))
