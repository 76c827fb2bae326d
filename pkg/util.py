import contextlib
import hashlib
import json
import os
import platform
import random
import sys

import numpy as np
import torch
from loguru import logger


LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | <level>{message}</level>"


def setup_logging(level=None):
    """
    Configure loguru for console output only.

    Args:
        level: Log level name; falls back to ZISTORM_LOG_LEVEL, then INFO
    """
    level = level or os.getenv("ZISTORM_LOG_LEVEL", "INFO")
    logger.remove()
    logger.add(sink=sys.stderr, format=LOG_FORMAT, colorize=True, level=level.upper())


def configure_threads():
    """
    Cap torch intra-op parallelism from ZISTORM_NUM_THREADS.

    Returns:
        Number of worker threads callers may use (1 when unset)
    """
    raw = os.getenv("ZISTORM_NUM_THREADS")
    if not raw:
        return 1
    try:
        num_threads = int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer ZISTORM_NUM_THREADS={raw!r}")
        return 1
    if num_threads < 1:
        logger.warning(f"Ignoring ZISTORM_NUM_THREADS={num_threads}, must be >= 1")
        return 1
    torch.set_num_threads(num_threads)
    return num_threads


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def parameter_hash(module):
    """sha256 over the raw bytes of every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def config_hash(mapping):
    canonical = json.dumps(mapping, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@contextlib.contextmanager
def frozen(module):
    """
    Disable gradients for every parameter of a module, restoring the
    previous flags on exit. Parameter values are never touched.
    """
    flags = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)


@contextlib.contextmanager
def module_mode(module, training):
    """Switch train/eval mode for the duration of the block, then restore it."""
    was_training = module.training
    module.train(training)
    try:
        yield module
    finally:
        module.train(was_training)


def eval_mode(module):
    return module_mode(module, False)


def train_mode(module):
    return module_mode(module, True)


def environment_stamp():
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "num_threads": torch.get_num_threads(),
    }
