"""scikit-learn style front end.

``ContinualClassifier`` wraps the functional core so a model can be trained
task by task with ``partial_fit`` and used anywhere an sklearn classifier is
expected (``clone``, ``get_params``, pipelines, ``score``).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from .errors import InputError
from .metrics import ScoreMatrix, evaluate, micro_f1, record_row
from .model import Example, ModelConfig, init_model, predict_proba_points
from .strategies import StrategyConfig, StrategyState, TrainConfig, begin_task, train_task
from .tasks import TaskSpec, TaskStream


class ContinualClassifier(ClassifierMixin, BaseEstimator):
    """MLP trained over a sequence of tasks with a continual-learning strategy.

    ``fit`` starts from a fresh model; each ``partial_fit`` call is one more task
    (learning-rate adjustment, Fisher snapshots and episodic memory carry over).

    For ``head_kind="token_labeling"``, ``X`` is a list of ``(n_tokens, n_features)``
    arrays and ``y`` a list of label-id arrays; ``label_names`` (BIO strings) are
    then needed for span-F1 scoring.
    """

    def __init__(self, hidden_dims=(64,), activation="tanh", head_kind="sequence_classification",
                 strategy="vanilla", lr=0.1, per_step_decay=1.0, use_lr_adjust=False, gamma=0.9,
                 lr_min=1e-6, batch_size=32, max_epochs=20, patience=5, ewc_lambda=5.0,
                 retrieve_num_samples=100, run_per_step=1, store_memory_prob=1.0,
                 max_store_num_samples=1000, fisher_num_samples=1000, label_names=None,
                 random_state=0):
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.head_kind = head_kind
        self.strategy = strategy
        self.lr = lr
        self.per_step_decay = per_step_decay
        self.use_lr_adjust = use_lr_adjust
        self.gamma = gamma
        self.lr_min = lr_min
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.ewc_lambda = ewc_lambda
        self.retrieve_num_samples = retrieve_num_samples
        self.run_per_step = run_per_step
        self.store_memory_prob = store_memory_prob
        self.max_store_num_samples = max_store_num_samples
        self.fisher_num_samples = fisher_num_samples
        self.label_names = label_names
        self.random_state = random_state

    @property
    def _token(self) -> bool:
        return self.head_kind == "token_labeling"

    def _strategy_config(self) -> StrategyConfig:
        return StrategyConfig(
            kind=self.strategy, ewc_lambda=self.ewc_lambda, fisher_num_samples=self.fisher_num_samples,
            store_memory_prob=self.store_memory_prob, max_store_num_samples=self.max_store_num_samples,
            retrieve_num_samples=self.retrieve_num_samples, run_per_step=self.run_per_step,
            use_lr_adjust=self.use_lr_adjust, gamma=self.gamma, lr_min=self.lr_min,
        )

    def _examples(self, X, y, task_id):
        if self._token:
            if len(X) != len(y):
                raise InputError(f"{len(X)} sequences but {len(y)} label sequences")
            return [Example(check_array(x), np.asarray(lab), task_id) for x, lab in zip(X, y)]
        X, y = validate_data(self, X, y, reset=False)
        if self.classes_ is not None:
            unknown = np.setdiff1d(np.unique(y), self.classes_)
            if unknown.size:
                raise InputError(f"labels {unknown.tolist()} not in classes_")
            y = np.searchsorted(self.classes_, y)
        return [Example(x, int(lab), task_id) for x, lab in zip(X, y)]

    def _init(self, X, y, classes):
        if self._token:
            first = check_array(X[0])
            n_features = first.shape[1]
            n_labels = len(self.label_names) if self.label_names else int(
                max(np.max(lab) for lab in y)) + 1
            self.classes_ = None
        else:
            X, y = validate_data(self, X, y)
            check_classification_targets(y)
            n_features = X.shape[1]
            self.classes_ = np.unique(y) if classes is None else np.unique(np.asarray(classes))
            n_labels = len(self.classes_)
        self.n_features_in_ = n_features
        self.model_config_ = ModelConfig(n_features, tuple(self.hidden_dims), max(n_labels, 2),
                                         self.activation, self.head_kind, self.random_state)
        self.theta_ = init_model(self.model_config_)
        self.state_ = StrategyState.create(self._strategy_config(), self.lr, self.random_state,
                                           self.per_step_decay)
        self.tasks_ = []

    def fit(self, X, y, X_dev=None, y_dev=None, task_id="task0"):
        """Train a fresh model on one task."""
        for attr in ("theta_", "state_", "tasks_"):
            if hasattr(self, attr):
                delattr(self, attr)
        return self.partial_fit(X, y, X_dev, y_dev, task_id=task_id)

    def partial_fit(self, X, y, X_dev=None, y_dev=None, task_id=None, classes=None):
        """Train on the next task of the sequence.

        Early stopping runs only when a dev split is given. ``classes`` fixes the
        label set on the first call, as with other incremental sklearn learners.
        """
        if not hasattr(self, "theta_"):
            self._init(X, y, classes)
        task_id = task_id or f"task{len(self.tasks_)}"
        train = self._examples(X, y, task_id)
        dev = self._examples(X_dev, y_dev, task_id) if X_dev is not None else []
        # train_task never reads the test split
        task = TaskSpec(task_id, "", train, dev, train, self.head_kind, tuple(self.label_names or ()))
        train_cfg = TrainConfig(self.batch_size, self.max_epochs, self.patience if dev else 0)
        begin_task(self.state_)
        self.theta_, self.state_ = train_task(self.theta_, self.model_config_, task, self.state_, train_cfg)
        self.tasks_.append(task_id)
        return self

    def fit_stream(self, stream: TaskStream):
        """Train through a whole stream, filling ``score_matrix_`` stage by stage."""
        tasks = list(stream.tasks)
        first = tasks[0]
        X0 = [ex.features for ex in first.train]
        y0 = [ex.label for ex in first.train]
        if not self._token:
            X0 = np.stack(X0)
        classes = None if self._token else np.arange(
            len(first.label_names) or int(max(ex.label for t in tasks for ex in t.train)) + 1)
        for attr in ("theta_", "state_", "tasks_"):
            if hasattr(self, attr):
                delattr(self, attr)
        self._init(X0, y0, classes)
        self.score_matrix_ = ScoreMatrix(stream.task_ids)
        train_cfg = TrainConfig(self.batch_size, self.max_epochs, self.patience)
        for stage, task in enumerate(tasks):
            begin_task(self.state_)
            cfg = train_cfg if task.dev else TrainConfig(self.batch_size, self.max_epochs, 0)
            self.theta_, self.state_ = train_task(self.theta_, self.model_config_, task, self.state_, cfg)
            self.tasks_.append(task.task_id)
            record_row(self.score_matrix_, stage, self.theta_, self.model_config_, stream)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "theta_")
        if self._token:
            return [predict_proba_points(self.theta_, self.model_config_, check_array(x)) for x in X]
        X = validate_data(self, X, reset=False)
        return predict_proba_points(self.theta_, self.model_config_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        if self._token:
            return [np.argmax(p, axis=1) for p in proba]
        return self.classes_[np.argmax(proba, axis=1)]

    def score(self, X, y, sample_weight=None):
        """Accuracy in [0, 1] for sequence tasks, span-F1 / 100 for token tasks."""
        if not self._token:
            return super().score(X, y, sample_weight)
        check_is_fitted(self, "theta_")
        examples = [Example(check_array(x), np.asarray(lab)) for x, lab in zip(X, y)]
        return evaluate(self.theta_, self.model_config_, examples, self.label_names or ()) / 100.0

    def f1(self, X, y) -> float:
        """Micro-F1 percentage (sequence tasks)."""
        return micro_f1(self.predict(X), np.asarray(y))
