"""Prompt templates shipped as package data."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

INSTRUCTION_SLOT = "[user instruction]"


@lru_cache(maxsize=None)
def template(name: str) -> str:
    return resources.files(__name__).joinpath(f"{name}.txt").read_bytes().decode("utf-8")


def caption_prompt(image_meta=None) -> str:
    return template("caption")


def animation_prompt(image_meta=None) -> str:
    return template("animation")


def judge_prompt(instruction: str) -> str:
    return template("judge").replace(INSTRUCTION_SLOT, instruction, 1)
