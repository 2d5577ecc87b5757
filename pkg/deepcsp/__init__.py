import logging
import time
from typing import Callable, Dict, Optional

from .data import EpochSet, split
from .training import Metrics, TrainConfig, evaluate, train, train_csp_baseline

logger = logging.getLogger(__name__)


def run_training(epochs: EpochSet, config: TrainConfig, holdout: float = 0.0,
                 on_epoch: Optional[Callable[[Metrics], None]] = None,
                 stop_requested: Optional[Callable[[], bool]] = None) -> Dict[str, object]:
    """Optional stratified holdout, training and holdout evaluation for one run."""
    started = time.time()
    train_set, test_set = epochs, None
    if holdout > 0.0:
        train_set, test_set = split(epochs, 1.0 - holdout, seed=config.seed, stratified=True)
        logger.info("holdout fraction=%s train_trials=%s test_trials=%s",
                    holdout, train_set.n_trials, test_set.n_trials)

    runner = train_csp_baseline if config.variant == "csp" else train
    result = runner(train_set, config, on_epoch=on_epoch, stop_requested=stop_requested)
    test_metrics = evaluate(result.params, result.bank, test_set, config.preprocess_band) if test_set else None

    best = result.history[result.best_epoch]
    return {
        "result": result,
        "best": best,
        "test": test_metrics,
        "train_trials": train_set.n_trials,
        "test_trials": 0 if test_set is None else test_set.n_trials,
        "elapsed_seconds": round(time.time() - started, 3),
    }
