'''

Replay utilities

Replay buffer for off-policy training and threaded rollout workers that
collect transitions with frozen policy snapshots

'''

import logging
import queue
import threading
from dataclasses import dataclass

import numpy as np

from lab_settings import read_lab_settings
from lab_errors import DimensionError

# Initialize the logger with the same settings
lab_dict = read_lab_settings()
logger = logging.getLogger(lab_dict['logger_name'])

MIN_ALLOCATION = 1024


@dataclass
class Transition:
    s: np.ndarray
    o_prev: int
    a: object
    r: float
    s_next: np.ndarray
    o: int
    done: bool


class ReplayBuffer:
    """
    Ring buffer of transitions with FIFO eviction at capacity.

    Storage grows by doubling up to capacity, so small runs do not
    allocate the full capacity up front.
    """

    def __init__(self, capacity, rng):
        if capacity < 1:
            raise ValueError(f'Replay capacity must be >= 1, got {capacity}')
        self.capacity = int(capacity)
        self.rng = rng
        self.size = 0
        self.cursor = 0
        self.storage = None

    def __len__(self):
        return self.size

    def _allocate(self, transition, n):

        s = np.asarray(transition.s, dtype=float)
        a = np.asarray(transition.a)
        discrete = np.issubdtype(a.dtype, np.integer)
        storage = {
            's': np.zeros((n,) + s.shape),
            'o_prev': np.zeros(n, dtype=int),
            'a': np.zeros(n, dtype=int) if discrete else np.zeros((n,) + a.shape),
            'r': np.zeros(n),
            's_next': np.zeros((n,) + s.shape),
            'o': np.zeros(n, dtype=int),
            'done': np.zeros(n),
        }
        if self.storage is not None:
            for key, value in self.storage.items():
                storage[key][:self.size] = value[:self.size]
        self.storage = storage

    def add(self, transition):
        ''' Append a Transition, evicting the oldest at capacity'''

        if self.storage is None:
            self._allocate(transition, min(self.capacity, MIN_ALLOCATION))
        elif self.cursor == len(self.storage['r']) and self.size < self.capacity:
            self._allocate(transition, min(self.capacity, 2 * len(self.storage['r'])))

        if np.shape(transition.s) != self.storage['s'].shape[1:]:
            raise DimensionError(f'Transition state shape {np.shape(transition.s)} '
                                 f'!= {self.storage["s"].shape[1:]}')
        i = self.cursor
        self.storage['s'][i] = transition.s
        self.storage['o_prev'][i] = transition.o_prev
        self.storage['a'][i] = transition.a
        self.storage['r'][i] = transition.r
        self.storage['s_next'][i] = transition.s_next
        self.storage['o'][i] = transition.o
        self.storage['done'][i] = float(transition.done)

        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size):
        ''' Uniform sample (with replacement) as a dict of stacked arrays'''

        if self.size < batch_size:
            raise ValueError(f'Replay buffer holds {self.size} transitions, cannot sample {batch_size}')
        idx = self.rng.integers(0, self.size, size=batch_size)
        return {key: value[idx].copy() for key, value in self.storage.items()}

    def oldest(self):
        ''' Index of the oldest stored transition'''

        return self.cursor if self.size == self.capacity else 0


class RolloutWorker:
    """Persistent per-worker environment state between collection rounds"""

    def __init__(self, worker_id, env, rng):
        self.worker_id = worker_id
        self.env = env
        self.rng = rng
        self.obs = env.reset()
        self.o_prev = 0
        self.episode_return = 0.0


def run_rollout_threads(rollout_threads):
    return [thread.join() for thread in rollout_threads]


def start_rollout_thread(worker, snapshot, n_steps, out_queue, thread_limiter):
    ''' Function implement threading for rollout collection'''

    thread = threading.Thread(target=collect_rollout, args=(worker, snapshot, n_steps, out_queue, thread_limiter))
    thread.start()

    return thread


def collect_rollout(worker, snapshot, n_steps, out_queue, thread_limiter):
    ''' Run n_steps with a frozen policy snapshot, pushing (worker_id, seq, item) tuples onto the queue'''

    semaphore_acquired = False
    try:
        thread_limiter.acquire()
        semaphore_acquired = True

        for seq in range(n_steps):
            o, a = snapshot.act(worker.obs, worker.o_prev, 'explore', worker.rng)
            next_obs, r, done, info = worker.env.step(snapshot.env_action(a))
            out_queue.put((worker.worker_id, seq, Transition(worker.obs, worker.o_prev, a, r, next_obs, o, done)))
            worker.episode_return += r
            worker.obs, worker.o_prev = next_obs, o
            if done or info.get('truncated', False):
                out_queue.put((worker.worker_id, seq, {'episode_return': worker.episode_return}))
                worker.obs = worker.env.reset()
                worker.o_prev = 0
                worker.episode_return = 0.0

    except Exception as e:
        logger.warning(f'Rollout worker {worker.worker_id} failed: {e}')
        out_queue.put((worker.worker_id, n_steps, e))

    finally:
        if semaphore_acquired:
            thread_limiter.release()


def drain_queue(out_queue):
    ''' Empty the queue and return its items ordered by (worker_id, seq)'''

    items = []
    while True:
        try:
            items.append(out_queue.get_nowait())
        except queue.Empty:
            break
    items.sort(key=lambda item: (item[0], item[1], isinstance(item[2], dict)))
    for _, _, payload in items:
        if isinstance(payload, Exception):
            raise payload
    return [payload for _, _, payload in items]


def collect_parallel(workers, snapshot, n_steps, max_num_threads):
    ''' One collection round across workers; returns transitions and finished episode returns in worker order'''

    out_queue = queue.Queue()
    thread_limiter = threading.BoundedSemaphore(max(1, max_num_threads))
    per_worker = [n_steps // len(workers) + (1 if i < n_steps % len(workers) else 0) for i in range(len(workers))]
    threads = [start_rollout_thread(worker, snapshot, steps, out_queue, thread_limiter)
               for worker, steps in zip(workers, per_worker) if steps > 0]
    run_rollout_threads(threads)

    transitions, returns = [], []
    for payload in drain_queue(out_queue):
        if isinstance(payload, Transition):
            transitions.append(payload)
        else:
            returns.append(payload['episode_return'])
    logger.debug(f'Collected {len(transitions)} transitions from {len(threads)} rollout threads')
    return transitions, returns
