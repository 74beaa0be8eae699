from vipsim.learner.average_learner import AverageLearner
from vipsim.learner.base_learner import BaseLearner
from vipsim.learner.sequence_learner import SequenceLearner

__all__ = ["AverageLearner", "BaseLearner", "SequenceLearner"]
