import logging
import os
from pathlib import Path
from queue import Empty
import threading
import time

LOG_FORMAT = "%(asctime)s %(levelname)-8s %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"


class LatentAugLogger(object):
    """Routes log messages from worker processes into the run's log file.

    Workers put ``(level, message)`` tuples on ``log_queue``; a daemon thread in the
    parent process drains the queue into :mod:`logging`.
    """

    WAIT_START_LOG = 3
    WAIT_STOP_LOG = 3
    WAIT_MSG = 100

    def __init__(self, log_dir, log_queue=None, level=logging.INFO, console=True):

        # check that log directory exists
        self.log_dir = Path(log_dir)
        os.makedirs(self.log_dir, exist_ok=True)

        # initialize logger attributes
        self.log_queue = log_queue
        self.log_thread = None
        self.is_logging = False

        handlers = [logging.FileHandler(self.log_dir / "latentaug.log")]
        if console:
            handlers.append(logging.StreamHandler())

        # set up logging to file
        logging.basicConfig(
            handlers=handlers,
            format=LOG_FORMAT,
            level=level,
            datefmt=LOG_DATEFMT,
            force=True,
        )

    def start_logging(self):

        if self.log_queue is None:
            return True

        self.log_thread = threading.Thread(target=self._log_on_thread, daemon=True)
        self.log_thread.start()

        res = False
        start_time = time.time()

        while (time.time() - start_time) < LatentAugLogger.WAIT_START_LOG:

            if self.is_logging:
                res = True
                break

            time.sleep(0.01)

        return res

    def _log_on_thread(self):

        self.is_logging = True

        while self.is_logging:

            try:
                log_entry = self.log_queue.get(timeout=LatentAugLogger.WAIT_MSG / 1000)
            except Empty:
                log_entry = None

            if log_entry is not None:
                emit(*log_entry)

    def stop_logging(self):

        res = True

        if self.log_thread is not None:

            self.is_logging = False
            self.log_thread.join(timeout=LatentAugLogger.WAIT_STOP_LOG)
            res = not self.log_thread.is_alive()

            # drain whatever arrived after the thread stopped
            while True:
                try:
                    emit(*self.log_queue.get_nowait())
                except (Empty, OSError, ValueError):
                    break

        for handler in logging.getLogger().handlers:
            handler.flush()

        return res


def emit(level, msg):

    if level == "error":

        logging.error(msg)

    elif level == "warning":

        logging.warning(msg)

    elif level == "debug":

        logging.debug(msg)

    else:

        logging.info(msg)


def queue_log(log_queue, level, msg):
    """Log from inside a worker: through the queue when there is one, directly otherwise."""

    if log_queue is not None:
        log_queue.put((level, msg))
    else:
        emit(level, msg)
