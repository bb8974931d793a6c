"""Datensatz-Einlesen und Fensterbildung.

CSV laden -> chronologisch splitten -> Scaler auf dem Train-Anteil fitten ->
standardisieren -> gleitende (L, T)-Fenster pro Split.

Metriken werden auf der standardisierten Skala berechnet (Konvention der
Benchmark-Tabellen).
"""

import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import pandas as pd

from src.config.defaults import ETTH_BORDERS, ETTM_BORDERS, RATIO_SPLIT, SplitClass
from src.core.errors import DataError

logger = logging.getLogger(__name__)

# Unterhalb dieser Standardabweichung gilt ein Kanal als konstant
CONSTANT_STD = 1e-12


@dataclass
class RawSeries:
    """Eingelesene multivariate Zeitreihe.

    Attributes:
        name: Dateiname ohne Endung.
        timestamps: Streng steigende Zeitstempel.
        values: Werte [total_len, M].
        columns: Kanalnamen in Dateireihenfolge.
    """
    name: str
    timestamps: pd.DatetimeIndex
    values: np.ndarray
    columns: list[str] = field(default_factory=list)

    @property
    def total_len(self) -> int:
        return int(self.values.shape[0])

    @property
    def channels(self) -> int:
        return int(self.values.shape[1])


def load_csv(path) -> RawSeries:
    """Liest eine Benchmark-CSV (erste Spalte 'date', Rest numerisch).

    Raises:
        DataError: Bei fehlender Datei, leeren/unlesbaren Zellen (mit Zeile
            und Spalte) oder nicht streng steigenden Zeitstempeln.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Datensatz nicht gefunden: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"CSV nicht lesbar: {path} - {e}") from e

    if frame.shape[1] < 2 or frame.columns[0] != "date":
        raise DataError(f"Erste Spalte muss 'date' heißen und mindestens ein Kanal folgen: {path}")

    # Zeile 1 ist der Header, Datenzeilen beginnen bei 2
    dates = pd.to_datetime(frame["date"], errors="coerce")
    bad_dates = np.flatnonzero(dates.isna().to_numpy())
    if bad_dates.size:
        row = int(bad_dates[0]) + 2
        raise DataError(f"Zeitstempel nicht lesbar in Zeile {row}, Spalte 'date'")

    channels = list(frame.columns[1:])
    numeric = frame[channels].apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    # leer, unlesbar oder nicht endlich (nan, inf, -inf)
    invalid = ~np.isfinite(numeric.to_numpy(dtype=np.float64))
    if invalid.any():
        row_idx, col_idx = np.argwhere(invalid)[0]
        cell = frame.iat[int(row_idx), int(col_idx) + 1]
        raise DataError(
            f"Ungültige Zelle in Zeile {int(row_idx) + 2}, Spalte '{channels[int(col_idx)]}': {cell!r}"
        )

    stamps = pd.DatetimeIndex(dates)
    if len(stamps) > 1:
        steps = np.diff(stamps.asi8)
        if (steps <= 0).any():
            row = int(np.flatnonzero(steps <= 0)[0]) + 3
            raise DataError(f"Zeitstempel nicht streng steigend ab Zeile {row}")

    values = numeric.to_numpy(dtype=np.float64)
    logger.info(f"Datensatz geladen: {path.name} ({values.shape[0]} Punkte, {values.shape[1]} Kanäle)")
    return RawSeries(name=path.stem, timestamps=stamps, values=values, columns=channels)


@dataclass
class SplitSpec:
    """Chronologische Grenzen in die Zeitachse.

    train = [0, train_end), val = [train_end, val_end), test = [val_end, test_end).
    Val/Test-Eingabefenster dürfen `lookback` Punkte vor ihre Grenze reichen.
    """
    train_end: int
    val_end: int
    test_end: int
    lookback: int = 0

    @property
    def borders(self) -> tuple[int, int, int]:
        return self.train_end, self.val_end, self.test_end

    def span(self, part: str) -> tuple[int, int]:
        """Erlaubter Indexbereich [start, end) eines Splits inkl. Rückgriff."""
        if part == "train":
            return 0, self.train_end
        if part == "val":
            return max(self.train_end - self.lookback, 0), self.val_end
        if part == "test":
            return max(self.val_end - self.lookback, 0), self.test_end
        raise ValueError(f"Unbekannter Split: {part}")


def split(
    series: RawSeries,
    dataset_class,
    lookback: int = 0,
    borders: Optional[Sequence[int]] = None,
) -> SplitSpec:
    """Split-Grenzen nach Protokoll.

    Args:
        series: Eingelesene Reihe.
        dataset_class: etth, ettm oder ratio.
        lookback: L, um den Val/Test-Fenster zurückgreifen dürfen.
        borders: Optionale eigene Grenzen (train_end, val_end, test_end).

    Raises:
        DataError: Wenn die Reihe kürzer als die Grenzen ist.
    """
    total = series.total_len
    split_class = SplitClass(dataset_class) if not isinstance(dataset_class, SplitClass) else dataset_class
    if borders is not None:
        train_end, val_end, test_end = (int(b) for b in borders)
    elif split_class is SplitClass.ETTH:
        train_end, val_end, test_end = ETTH_BORDERS
    elif split_class is SplitClass.ETTM:
        train_end, val_end, test_end = ETTM_BORDERS
    else:
        train_end = int(total * RATIO_SPLIT[0])
        test_len = int(total * RATIO_SPLIT[2])
        val_end = total - test_len
        test_end = total

    if not 0 < train_end < val_end < test_end:
        raise DataError(f"Split-Grenzen nicht aufsteigend: {(train_end, val_end, test_end)}")
    if test_end > total:
        raise DataError(
            f"Reihe '{series.name}' hat {total} Punkte, Split braucht {test_end}"
        )
    spec = SplitSpec(train_end=train_end, val_end=val_end, test_end=test_end, lookback=lookback)
    logger.info(f"Split '{split_class.value}': Grenzen {spec.borders}, Rückgriff L={lookback}")
    return spec


@dataclass
class Scaler:
    """Kanalweise Standardisierung mit Train-Statistik (ddof=0).

    Attributes:
        mean: Mittelwerte je Kanal.
        std: Standardabweichungen je Kanal (konstante Kanäle: 1.0).
        constant: Maske der als konstant markierten Kanäle.
    """
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray


def fit_scaler(series: RawSeries, spec: SplitSpec) -> Scaler:
    """Fittet den Scaler ausschließlich auf dem Train-Anteil."""
    train = series.values[: spec.train_end]
    mean = train.mean(axis=0)
    std = train.std(axis=0, ddof=0)
    constant = std < CONSTANT_STD
    if constant.any():
        names = [series.columns[i] if series.columns else str(i) for i in np.flatnonzero(constant)]
        logger.warning(f"Konstante Kanäle im Train-Anteil, Skalierung 1.0: {', '.join(names)}")
    return Scaler(mean=mean, std=np.where(constant, 1.0, std), constant=constant)


def transform(series: RawSeries, scaler: Scaler) -> RawSeries:
    """(x - mean) / std je Kanal; liefert eine neue Reihe."""
    values = (series.values - scaler.mean) / scaler.std
    return RawSeries(
        name=series.name,
        timestamps=series.timestamps,
        values=values,
        columns=list(series.columns),
    )


@dataclass
class WindowDataset:
    """Gleitende Fenster über einem Split-Ausschnitt.

    Fenster i: Eingabe [i, i+L), Ziel [i+L, i+L+T) relativ zu `offset`.
    """
    values: np.ndarray
    lookback: int
    horizon: int
    starts: np.ndarray
    offset: int = 0

    def __len__(self) -> int:
        return int(self.starts.size)

    @property
    def channels(self) -> int:
        return int(self.values.shape[1])

    def window(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """(Eingabe [L, M], Ziel [T, M]) des Fensters `index`."""
        if not 0 <= index < len(self):
            raise IndexError(f"Fenster {index} außerhalb von [0, {len(self)})")
        start = int(self.starts[index])
        mid = start + self.lookback
        return self.values[start:mid], self.values[mid:mid + self.horizon]

    def batch(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Stapelt Fenster zu (X [B, M, L], Y [B, M, T])."""
        inputs, targets = zip(*(self.window(int(i)) for i in indices))
        x = np.stack(inputs).transpose(0, 2, 1)
        y = np.stack(targets).transpose(0, 2, 1)
        return np.ascontiguousarray(x), np.ascontiguousarray(y)

    def batch_order(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> list[np.ndarray]:
        """Indexblöcke einer Epoche; mit rng gemischt, sonst in Reihenfolge."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        return [order[i:i + batch_size] for i in range(0, len(self), batch_size)]


def make_windows(values: np.ndarray, lookback: int, horizon: int, offset: int = 0) -> WindowDataset:
    """Alle Startpositionen 0..len-L-T eines Ausschnitts.

    Raises:
        DataError: Wenn der Ausschnitt kürzer als L + T ist.
    """
    length = int(values.shape[0])
    if length < lookback + horizon:
        raise DataError(
            f"Ausschnitt zu kurz: {length} Punkte, mindestens L+T={lookback + horizon} nötig"
        )
    starts = np.arange(length - lookback - horizon + 1)
    return WindowDataset(values=values, lookback=lookback, horizon=horizon, starts=starts, offset=offset)


@dataclass
class PreparedData:
    """Alles, was Training und Evaluation aus einer CSV brauchen."""
    series: RawSeries
    spec: SplitSpec
    scaler: Scaler
    train: WindowDataset
    val: WindowDataset
    test: WindowDataset

    @property
    def channels(self) -> int:
        return self.series.channels


def prepare_data(
    path,
    dataset_class,
    lookback: int,
    horizon: int,
    borders: Optional[Sequence[int]] = None,
) -> PreparedData:
    """Pipeline CSV -> Split -> Scaler -> Fenster je Split."""
    raw = load_csv(path)
    spec = split(raw, dataset_class, lookback=lookback, borders=borders)
    scaler = fit_scaler(raw, spec)
    standardized = transform(raw, scaler)
    windows = {}
    for part in ("train", "val", "test"):
        start, end = spec.span(part)
        windows[part] = make_windows(standardized.values[start:end], lookback, horizon, offset=start)
    logger.info(
        f"Fenster: train={len(windows['train'])}, val={len(windows['val'])}, test={len(windows['test'])}"
    )
    return PreparedData(series=standardized, spec=spec, scaler=scaler, **windows)


class BatchPrefetcher(threading.Thread):
    """Hintergrund-Thread, der Batches in eine begrenzte Warteschlange legt.

    Die Reihenfolge ist durch `order` festgelegt, Ergebnisse sind daher
    identisch zum synchronen Pfad.
    """

    _DONE = object()

    def __init__(self, dataset: WindowDataset, order: list[np.ndarray], depth: int) -> None:
        super().__init__(daemon=True)
        self._dataset = dataset
        self._order = order
        self._queue: queue.Queue = queue.Queue(maxsize=max(depth, 1))
        self._cancelled = False
        self._error: Optional[BaseException] = None

    def run(self) -> None:
        try:
            for indices in self._order:
                if self._cancelled:
                    break
                self._queue.put(self._dataset.batch(indices))
        except Exception as e:
            logger.exception("Batch-Vorbereitung fehlgeschlagen")
            self._error = e
        finally:
            if not self._cancelled:
                self._queue.put(self._DONE)

    def cancel(self) -> None:
        self._cancelled = True
        # Platz schaffen, falls der Producer blockiert
        try:
            while True:
                self._queue.get_nowait()
        except queue.Empty:
            pass

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        while True:
            item = self._queue.get()
            if item is self._DONE:
                break
            yield item
        if self._error is not None:
            raise DataError(f"Batch-Vorbereitung fehlgeschlagen: {self._error}")


def iter_batches(
    dataset: WindowDataset,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    prefetch: int = 0,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Batches einer Epoche, optional über einen Prefetch-Thread."""
    order = dataset.batch_order(batch_size, rng)
    if prefetch <= 0:
        for indices in order:
            yield dataset.batch(indices)
        return
    worker = BatchPrefetcher(dataset, order, prefetch)
    worker.start()
    try:
        yield from worker
    finally:
        worker.cancel()
        worker.join()
