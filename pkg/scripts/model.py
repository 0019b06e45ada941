"""
WEFT Segmenter
Frozen backbone + wavelet expert extractor + four EC adapters + decoder,
with parameter accounting and WTEN checkpoints
"""

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from scripts.base_module import BaseModule
from scripts.decoder import Decoder
from scripts.ec_adapter import AdapterStage, assemble_tokens
from scripts.frozen_backbone import FrozenBackbone
from scripts.peft_baselines import PromptTokens, attach_lora
from scripts.twe_extractor import RoutingDecision, TWEExtractor
from utils import functional as F
from utils.config import ConfigError
from utils.tensor import Tensor
from utils.wten import read_wten, write_wten

REGIMES = ("frozen", "lora", "vpt", "weft", "full")
# regimes that train no wavelet branch and decode the last frozen block
BACKBONE_ONLY_REGIMES = ("frozen", "lora", "vpt")
DECODE_SOURCES = ("adapted", "frozen_out")
NUM_STAGES = 4


@dataclass
class ModelConfig:
    image_size: int = 128
    channels: int = 32
    frozen_dim: int = 64
    heads: int = 4
    frozen_mlp_dim: int = 2048
    k_experts: int = 4
    subspaces: int = 4
    rho: float = 1.0
    lam: float = 1.0
    points: int = 4
    decoder_width: int = 16
    use_twe_router: bool = True
    use_esto: bool = True
    use_see: bool = True
    regime: str = "weft"
    decode_from: str = "adapted"
    lora_rank: int = 4
    prompt_tokens: int = 8

    def validate(self):
        if self.image_size < 64 or self.image_size % 32:
            # the 1/32 level must still hold a 2x2 map for the Haar transform
            raise ConfigError(f"IMAGE_SIZE must be a multiple of 32 and at least 64, got {self.image_size}")
        if self.channels % 4:
            raise ConfigError(f"CHANNELS must be divisible by 4, got {self.channels}")
        if self.subspaces < 1 or self.frozen_dim % self.subspaces:
            raise ConfigError(f"FROZEN_DIM ({self.frozen_dim}) must be divisible by SUBSPACES ({self.subspaces})")
        if self.frozen_dim % self.heads:
            raise ConfigError(f"FROZEN_DIM ({self.frozen_dim}) must be divisible by HEADS ({self.heads})")
        if not 1 <= self.k_experts <= 7:
            raise ConfigError(f"K_EXPERTS must be in 1..7, got {self.k_experts}")
        if self.rho <= 0:
            raise ConfigError(f"RHO must be > 0, got {self.rho}")
        if self.lam < 0:
            raise ConfigError(f"LAM must be >= 0, got {self.lam}")
        if self.points < 1:
            raise ConfigError(f"POINTS must be >= 1, got {self.points}")
        if self.regime not in REGIMES:
            raise ConfigError(f"REGIME must be one of {REGIMES}, got '{self.regime}'")
        if self.decode_from not in DECODE_SOURCES:
            raise ConfigError(f"DECODE_FROM must be one of {DECODE_SOURCES}, got '{self.decode_from}'")
        if self.lora_rank < 1 or self.prompt_tokens < 1:
            raise ConfigError(f"LORA_RANK and PROMPT_TOKENS must be >= 1, got {self.lora_rank}, {self.prompt_tokens}")
        return self


@dataclass
class ForwardResult:
    logits: Tensor
    decisions: List[RoutingDecision]


@dataclass
class ParamCount:
    frozen: int
    trainable: int

    @property
    def total(self) -> int:
        return self.frozen + self.trainable

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def as_dict(self) -> Dict[str, float]:
        return {"frozen": self.frozen, "trainable": self.trainable, "fraction": self.fraction}


def tokens_to_map(tokens: Tensor, hw) -> Tensor:
    b, _, d = tokens.shape
    return F.transpose(F.reshape(tokens, (b, hw[0], hw[1], d)), (0, 3, 1, 2))


class WeftModel(BaseModule):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__("", seed)
        self.config = config.validate()
        c = config
        self.backbone = self.child("backbone", FrozenBackbone(seed, c.image_size, c.frozen_dim, c.heads,
                                                              c.frozen_mlp_dim))
        self.twe = None
        self.adapters = []
        self.lora = []
        self.prompts = None
        if c.regime == "lora":
            self.lora = [self.child(d.name, d) for d in attach_lora(self.backbone, seed, c.lora_rank)]
        elif c.regime == "vpt":
            self.prompts = self.child("vpt", PromptTokens("vpt", seed, c.frozen_dim, c.prompt_tokens, NUM_STAGES))
        elif c.regime not in BACKBONE_ONLY_REGIMES:
            self.twe = self.child("twe", TWEExtractor(seed, c.channels, c.k_experts, c.use_twe_router))
            self.adapters = [
                self.child(f"ec{i}", AdapterStage(f"ec.stage{i}", seed, c.frozen_dim, c.channels, c.points,
                                                  c.subspaces, c.rho, c.lam, c.use_esto, c.use_see))
                for i in range(1, NUM_STAGES + 1)
            ]
        self.decoder = self.child("decoder", Decoder(seed, c.frozen_dim, c.channels, c.decoder_width,
                                                     with_pyramid=c.regime not in BACKBONE_ONLY_REGIMES))
        if c.regime == "full":
            self.backbone.unfreeze()

    def run(self, image: Tensor) -> ForwardResult:
        c = self.config
        if image.ndim != 4 or image.shape[1] != 3 or tuple(image.shape[2:]) != (c.image_size, c.image_size):
            raise ConfigError(f"image shape {image.shape} does not match config (B, 3, {c.image_size}, {c.image_size})")
        grid = self.backbone.grid_hw
        image_hw = (c.image_size, c.image_size)
        frozen = self.backbone.embed(image)

        if c.regime in BACKBONE_ONLY_REGIMES:
            for i in range(1, NUM_STAGES + 1):
                if self.prompts is not None:
                    frozen = self.prompts(self.backbone, i, frozen)
                else:
                    frozen = self.backbone.block(i, frozen)
            return ForwardResult(self.decoder(tokens_to_map(frozen, grid), None, image_hw), [])

        pyramid = self.twe(image)
        bundle = assemble_tokens(*pyramid.features[1:])
        refined = frozen
        for i, adapter in enumerate(self.adapters, start=1):
            refined, bundle = adapter(frozen, bundle, grid)
            if i < NUM_STAGES or c.decode_from == "frozen_out":
                frozen = self.backbone.block(i, refined)
        decode_tokens = refined if c.decode_from == "adapted" else frozen
        logits = self.decoder(tokens_to_map(decode_tokens, grid), bundle.maps(), image_hw)
        return ForwardResult(logits, pyramid.decisions)

    def forward(self, image: Tensor) -> Tensor:
        return self.run(image).logits

    def state(self, frozen: Optional[bool] = None) -> Dict[str, np.ndarray]:
        """Parameter arrays by name; frozen=True/False selects a subset"""
        return {name: p.data for name, p in self.named_parameters() if frozen is None or p.frozen == frozen}

    def load_state(self, tensors: Dict[str, np.ndarray]):
        params = self.parameters()
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        if missing or extra:
            raise ConfigError(f"checkpoint does not match model: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in params.items():
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise ConfigError(f"checkpoint tensor '{name}' has shape {tensors[name].shape}, model expects {p.shape}")
            p.data = tensors[name]


def model_forward(model: WeftModel, image: Tensor) -> Tensor:
    return model(image)


def count_params(model: BaseModule) -> ParamCount:
    frozen = trainable = 0
    for _, p in model.named_parameters():
        if p.frozen:
            frozen += p.size
        else:
            trainable += p.size
    return ParamCount(frozen, trainable)


def sidecar_path(checkpoint_path: str) -> str:
    root, _ = os.path.splitext(checkpoint_path)
    return root + ".json"


def save_checkpoint(model: WeftModel, path: str, extra: Optional[dict] = None) -> None:
    """checkpoint.wten plus checkpoint.json (config, seed, frozen flag per name)"""
    write_wten(path, model.state())
    sidecar = {
        "config": dataclasses.asdict(model.config),
        "seed": int(model.seed),
        "frozen": {name: bool(p.frozen) for name, p in model.named_parameters()},
    }
    if extra:
        sidecar.update(extra)
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        f.write(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path: str) -> WeftModel:
    meta_path = sidecar_path(path)
    if not os.path.isfile(meta_path):
        raise ConfigError(f"checkpoint sidecar not found: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in sidecar["config"].items() if k in known})
    model = WeftModel(config, seed=int(sidecar.get("seed", 0)))
    model.load_state(read_wten(path))
    for name, p in model.named_parameters():
        if sidecar.get("frozen", {}).get(name, p.frozen):
            p.freeze()
        else:
            p.unfreeze()
    return model
