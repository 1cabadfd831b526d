"""
Error and Alarm Handler

Central error logging for the console daemon, plus the operator alarm list
(watchdog give-ups, console log failures) shown by `farmctl watchdog alarms`.
"""

import json
import logging
import threading
import traceback
from collections import deque
from datetime import datetime, timezone
from typing import Any, Deque, Dict, List, Optional

from errors import FarmError

MAX_ALARMS = 200
MAX_ERROR_DETAILS = 100
MAX_TRANSPORT_RETRIES = 3

TRANSPORT_SUGGESTIONS = {
    'AckTimeout': ('Relay box did not answer. Check the chain cable and box power.', True),
    'Nak': ('Relay box rejected the frame. Line noise on the chain?', True),
    'EndpointClosed': ('Serial endpoint went away. Check the device node.', False),
    'DeviceUnavailable': ('Device missing or held by another process.', False),
}


class ErrorHandler:
    """
    Operational logging, error history and operator alarms for one server.

    Timestamps come from `clock` when given so simulated runs log sim time.
    """

    def __init__(self, log_file: Optional[str] = None, log_level=logging.INFO, detail_file: Optional[str] = None, clock=None):
        self.log_file = log_file
        self.detail_file = detail_file
        self.clock = clock

        handlers: List[logging.Handler] = [logging.StreamHandler()]
        if log_file:
            handlers.append(logging.FileHandler(log_file))
        logging.basicConfig(
            level=log_level,
            format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
            handlers=handlers
        )

        self.logger = logging.getLogger('FarmconErrorHandler')
        self.error_count = 0
        self._details: Deque[Dict] = deque(maxlen=MAX_ERROR_DETAILS)
        self._alarms: Deque[Dict] = deque(maxlen=MAX_ALARMS)
        self._lock = threading.Lock()

    def _timestamp(self) -> str:
        if self.clock is not None:
            return self.clock.timestamp()
        return datetime.now(timezone.utc).isoformat()

    def log_error(self, error: Exception, context: str = "", metadata: Optional[Dict[str, Any]] = None,
                  critical: bool = False) -> Dict:
        """
        Record a failure and return its detail record.

        FarmErrors are expected conditions and carry no traceback; anything
        else keeps the traceback of the exception being handled.
        """
        with self._lock:
            self.error_count += 1
            count = self.error_count

        detail = {
            'timestamp': self._timestamp(),
            'error_type': type(error).__name__,
            'error_code': getattr(error, 'code', 'internal'),
            'error_message': str(error),
            'context': context,
            'traceback': '' if isinstance(error, FarmError) else traceback.format_exc(),
            'metadata': metadata or {},
            'count': count
        }

        level = logging.CRITICAL if critical else logging.ERROR
        self.logger.log(level, f"{context or 'unknown'}: {detail['error_type']}: {error}")
        self._save_error_detail(detail)
        return detail

    def _save_error_detail(self, error_info: Dict):
        """Keep the last errors in memory and, if configured, in a JSON file"""
        with self._lock:
            self._details.append(error_info)
            snapshot = list(self._details)
        if not self.detail_file:
            return
        try:
            with open(self.detail_file, 'w') as f:
                json.dump(snapshot, f, indent=2)
        except OSError as e:
            self.logger.error(f"Failed to save error detail: {e}")

    def raise_alarm(self, message: str, host: str = "-", context: str = "") -> Dict:
        """
        Record an operator alarm. Alarms stay listed until cleared.
        """
        alarm = {
            'timestamp': self._timestamp(),
            'host': host,
            'message': message,
            'context': context,
        }
        with self._lock:
            self._alarms.append(alarm)
        self.logger.critical(f"ALARM {host}: {message}" + (f" ({context})" if context else ""))
        return alarm

    def clear_alarms(self, host: str) -> int:
        with self._lock:
            kept = [a for a in self._alarms if a['host'] != host]
            cleared = len(self._alarms) - len(kept)
            self._alarms = deque(kept, maxlen=MAX_ALARMS)
        return cleared

    def alarms(self) -> List[Dict]:
        with self._lock:
            return list(self._alarms)

    def handle_transport_error(self, what: str, error: Exception, retry_count: int = 0) -> Dict:
        """Log a port or chain failure with a hint for the operator"""
        detail = self.log_error(error, context=f"Transport: {what}", metadata={'retry_count': retry_count})
        message, retryable = TRANSPORT_SUGGESTIONS.get(type(error).__name__, ('Unknown error occurred.', False))
        return {
            **detail,
            'suggestion': {'message': message, 'retryable': retryable},
            'should_retry': retryable and retry_count < MAX_TRANSPORT_RETRIES
        }

    def get_error_stats(self) -> Dict:
        with self._lock:
            details = list(self._details)
            alarm_count = len(self._alarms)
        by_type: Dict[str, int] = {}
        for detail in details:
            by_type[detail['error_type']] = by_type.get(detail['error_type'], 0) + 1
        return {
            'total_errors': len(details),
            'by_type': by_type,
            'recent_errors': details[-5:],
            'alarms': alarm_count
        }
