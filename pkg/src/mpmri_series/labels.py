"""The closed set of series types the classifier distinguishes."""
from __future__ import annotations

import enum


class SeriesLabel(enum.IntEnum):
    T1W_PRE = 0
    T1W_ART = 1
    T1W_POR = 2
    T1W_DEL = 3
    T2 = 4
    T2FS = 5
    DWI = 6
    ADC = 7

    @property
    def token(self) -> str:
        return _TOKENS[self]

    @property
    def short(self) -> str:
        """Abbreviation used on confusion-matrix axes."""
        return _SHORT[self]

    @classmethod
    def from_token(cls, token: str) -> "SeriesLabel":
        try:
            return _BY_TOKEN[token.strip()]
        except KeyError:
            raise ValueError(f"unknown series label token {token!r}; expected one of {TOKENS}") from None


_TOKENS = {
    SeriesLabel.T1W_PRE: "T1w-pre",
    SeriesLabel.T1W_ART: "T1w-art",
    SeriesLabel.T1W_POR: "T1w-por",
    SeriesLabel.T1W_DEL: "T1w-del",
    SeriesLabel.T2: "T2",
    SeriesLabel.T2FS: "T2FS",
    SeriesLabel.DWI: "DWI",
    SeriesLabel.ADC: "ADC",
}
_SHORT = {
    SeriesLabel.T1W_PRE: "T1w-p",
    SeriesLabel.T1W_ART: "T1w-a",
    SeriesLabel.T1W_POR: "T1w-v",
    SeriesLabel.T1W_DEL: "T1w-d",
    SeriesLabel.T2: "T2",
    SeriesLabel.T2FS: "T2FS",
    SeriesLabel.DWI: "DWI",
    SeriesLabel.ADC: "ADC",
}
_BY_TOKEN = {v: k for k, v in _TOKENS.items()}

NUM_CLASSES = len(SeriesLabel)
TOKENS = tuple(_TOKENS[label] for label in SeriesLabel)
# post-contrast dynamic phases; their mutual confusions are the expected error mode
DYNAMIC_PHASES = (SeriesLabel.T1W_ART, SeriesLabel.T1W_POR, SeriesLabel.T1W_DEL)
