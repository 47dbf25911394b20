"""Time-aware, popularity-debiased offline evaluation for recommenders."""

__version__ = "0.1.0"

from .data import (Interaction, InteractionLog, PopularityTable, RelevantItems,
                   compute_popularity, ingest_log, relevant_items)
from .errors import (EmptyLog, EmptyRecommendationLog, InstanceTooLarge, MalformedRow,
                     MissingCell, ModelFailure, RecgapError, SingularSystem, UnknownItem,
                     UnknownUser)
from .offline import (ColdStart, MetricConfig, RecallResult, Val, oracle_recall, recall_lloo,
                      recall_lloo_beta, recall_loo, recall_loo_beta, user_weight)
from .models import ModelSpec, RecModel, load_model, save_model, train_implicit_mf
from .online import CtrResult, RecommendationEvent, ictr

__all__ = [
    "ColdStart", "CtrResult", "EmptyLog", "EmptyRecommendationLog", "InstanceTooLarge",
    "Interaction", "InteractionLog", "MalformedRow", "MetricConfig", "MissingCell",
    "ModelFailure", "ModelSpec", "PopularityTable", "RecModel", "RecallResult", "RecgapError", "RecommendationEvent",
    "RelevantItems", "SingularSystem", "UnknownItem", "UnknownUser", "Val",
    "compute_popularity", "ictr", "ingest_log", "oracle_recall", "recall_lloo",
    "load_model", "recall_lloo_beta", "recall_loo", "recall_loo_beta", "relevant_items",
    "save_model", "train_implicit_mf", "user_weight",
]
