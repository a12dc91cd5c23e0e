"""
Activity Logger - Structured Run Log for Reconstruction Commands

This module provides the JSON-lines activity log written next to every run's outputs:
- ActivityLogger: one JSON object per event (timestamp, user, action, description, level, metadata)
- Session start/end bookkeeping when used as a context manager
- Reading, filtering and summarising a log, and exporting it to CSV
"""

import json
from pathlib import Path
from typing import Union, Optional, Dict, List, Any
from datetime import datetime

import numpy as np
import pandas as pd


LEVELS = ("INFO", "WARNING", "ERROR")
LOG_COLUMNS = ['timestamp', 'user', 'action', 'description', 'level']

STAGE_ACTIONS = {
    'simulate': 'sinogram_simulated',
    'reconstruct': 'image_reconstructed',
    'evaluate': 'quality_evaluated',
    'verify': 'suite_verified',
    'write': 'file_written',
}


def _json_default(value: Any) -> Any:
    """Serialise numpy scalars/arrays and paths found in metadata."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


class ActivityLogger:
    """
    Logger recording the events of a reconstruction run.

    Parameters
    ----------
    log_file : str or Path
        JSON-lines file the events are appended to.
    user : str, optional
        Who produced the events; the CLI passes the command name.
    auto_log_session : bool, default False
        Log session_start/session_end when used as a context manager.

    Examples
    --------
    >>> with ActivityLogger("out/activity.log", user="reconstruct", auto_log_session=True) as logger:
    ...     logger.log("solver_start", "elda for up to 19 iterations", metadata={"max_iter": 19})
    """

    def __init__(self,
                 log_file: Union[str, Path],
                 user: Optional[str] = None,
                 auto_log_session: bool = False):
        self.log_file = Path(log_file)
        self.user = user or "unknown"
        self.auto_log_session = auto_log_session
        self.log_file.parent.mkdir(parents=True, exist_ok=True)
        self.log_file.touch(exist_ok=True)

    def log(self,
            action: str,
            description: str,
            level: str = "INFO",
            metadata: Optional[Dict[str, Any]] = None) -> None:
        """
        Append one event.

        Parameters
        ----------
        action : str
            Event type (e.g. 'solver_start', 'epsilon_reduced').
        description : str
            Human-readable summary.
        level : {'INFO', 'WARNING', 'ERROR'}
            Severity.
        metadata : dict, optional
            Numeric details; numpy values are converted to plain JSON.

        Raises
        ------
        ValueError
            For an unknown level.
        """
        if level not in LEVELS:
            raise ValueError(f"Unknown log level: {level}")
        event = dict(zip(LOG_COLUMNS, (datetime.now().isoformat(), self.user, action, description, level)))
        if metadata:
            event['metadata'] = metadata
        line = json.dumps(event, default=_json_default)

        with open(self.log_file, 'a', encoding='utf-8') as f:
            f.write(line + '\n')

    def __enter__(self):
        if self.auto_log_session:
            self.log('session_start', f'{self.user} started')
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.auto_log_session:
            if exc_type is not None:
                self.log('session_end', f'{self.user} ended with error: {exc_type.__name__}',
                         level='ERROR', metadata={'error': str(exc_val)})
            else:
                self.log('session_end', f'{self.user} finished')
        return False


def log_activity(log_file: Union[str, Path],
                 action: str,
                 description: str,
                 user: Optional[str] = None,
                 level: str = "INFO",
                 metadata: Optional[Dict[str, Any]] = None) -> None:
    """One-off event without keeping a logger around."""
    ActivityLogger(log_file, user=user).log(action, description, level=level, metadata=metadata)


def log_run_event(logger: ActivityLogger, stage: str, details: str, **metadata: Any) -> None:
    """
    Log a pipeline stage with a standard action name.

    ``stage`` is one of simulate, reconstruct, evaluate, verify or write;
    other names become ``run_<stage>``.
    """
    action = STAGE_ACTIONS.get(stage, f'run_{stage}')
    logger.log(action, details, metadata=metadata if metadata else None)


def log_error(logger: ActivityLogger, error_type: str, error_message: str, **metadata: Any) -> None:
    logger.log(f'error_{error_type}', error_message, level='ERROR',
               metadata=metadata if metadata else None)


# ==============================================================================
# Reading logs
# ==============================================================================

def read_activity_log(log_file: Union[str, Path]) -> List[Dict[str, Any]]:
    """
    Read every event in file order.

    Missing files give an empty list; malformed lines are skipped.
    """
    path = Path(log_file)
    if not path.exists():
        return []
    events = []
    for raw in path.read_text(encoding='utf-8').splitlines():
        if not raw.strip():
            continue
        try:
            events.append(json.loads(raw))
        except json.JSONDecodeError:
            pass
    return events


def _event_frame(events: List[Dict[str, Any]]) -> pd.DataFrame:
    """One row per event with the standard columns plus ``metadata`` (NaN when absent)."""
    return pd.DataFrame(events, columns=LOG_COLUMNS + ['metadata'])


def filter_activities(log_file: Union[str, Path],
                      action: Optional[str] = None,
                      user: Optional[str] = None,
                      level: Optional[str] = None,
                      start_date: Optional[datetime] = None,
                      end_date: Optional[datetime] = None) -> List[Dict[str, Any]]:
    """
    Events matching every given criterion, in file order.

    Examples
    --------
    >>> reductions = filter_activities("out/activity.log", action="epsilon_reduced")
    >>> failures = filter_activities("out/activity.log", level="ERROR")
    """
    events = read_activity_log(log_file)
    if not events:
        return []
    frame = _event_frame(events)
    keep = pd.Series(True, index=frame.index)
    for column, wanted in (('action', action), ('user', user), ('level', level)):
        if wanted:
            keep &= frame[column] == wanted
    if start_date or end_date:
        stamps = pd.to_datetime(frame['timestamp'])
        if start_date:
            keep &= stamps >= start_date
        if end_date:
            keep &= stamps <= end_date
    return [events[i] for i in np.flatnonzero(keep.to_numpy())]


def get_activity_stats(log_file: Union[str, Path]) -> Dict[str, Any]:
    """
    Event counts of a log.

    Returns
    -------
    dict
        total_activities; action_counts, level_counts and user_counts; and
        date_range with the first and last timestamp (None for an empty log).
    """
    frame = _event_frame(read_activity_log(log_file))
    stats: Dict[str, Any] = {'total_activities': len(frame)}
    for column in ('action', 'level', 'user'):
        stats[f'{column}_counts'] = {key: int(count) for key, count in frame[column].value_counts().items()}
    if frame.empty:
        stats['date_range'] = None
    else:
        stamps = pd.to_datetime(frame['timestamp'])
        stats['date_range'] = {'first': stamps.min().isoformat(), 'last': stamps.max().isoformat()}
    return stats


def export_log_to_csv(log_file: Union[str, Path],
                      output_file: Union[str, Path],
                      include_metadata: bool = False) -> Path:
    """Write the log as CSV; metadata becomes a sorted-key JSON column when requested."""
    frame = _event_frame(read_activity_log(log_file))
    frame[LOG_COLUMNS] = frame[LOG_COLUMNS].fillna('')
    columns = list(LOG_COLUMNS)
    if include_metadata:
        frame['metadata'] = [json.dumps(m, sort_keys=True) if isinstance(m, dict) else ''
                             for m in frame['metadata']]
        columns.append('metadata')

    target = Path(output_file)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame[columns].to_csv(target, index=False)
    return target
