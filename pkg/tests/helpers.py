"""Builders for small hand-written schemas and dialogues used across tests."""

from __future__ import annotations

from typing import Mapping, Sequence

from schema_dst.data import (
    SYSTEM,
    USER,
    Action,
    Dialogue,
    DialogueState,
    Frame,
    IntentDef,
    ServiceSchema,
    SlotDef,
    SlotSpan,
    Turn,
)


def banks_schema() -> ServiceSchema:
    return ServiceSchema(
        "Banks_1",
        "Manage bank accounts and transfer money",
        (
            SlotDef("account_type", "The account type of the user", True, ("checking", "savings")),
            SlotDef("amount", "The amount of money to transfer", False),
            SlotDef("recipient", "The person receiving the money", False),
        ),
        (
            IntentDef("CheckBalance", "Check the amount of money in a user's bank account", False, ("account_type",)),
            IntentDef("TransferMoney", "Transfer money to another user", True, ("account_type", "amount", "recipient")),
        ),
    )


def rental_cars_schema() -> ServiceSchema:
    return ServiceSchema(
        "RentalCars_1",
        "Car rental service",
        (
            SlotDef("pickup_city", "City where the car is picked up", False),
            SlotDef("pickup_date", "Date of the car pickup", False),
            SlotDef("car_type", "Kind of car", True, ("Compact", "SUV")),
        ),
        (
            IntentDef("GetCarsAvailable", "Find rental cars", False, ("pickup_city", "pickup_date"), ("car_type",)),
            IntentDef("ReserveCar", "Reserve a rental car", True, ("pickup_city", "pickup_date"), ("car_type",)),
        ),
    )


def buses_schema() -> ServiceSchema:
    return ServiceSchema(
        "Buses_1",
        "Book bus journeys",
        (
            SlotDef("from_location", "City of departure", False),
            SlotDef("to_location", "City of arrival", False),
            SlotDef("leaving_date", "Date of departure", False),
            SlotDef("leaving_time", "Time of departure", False),
            SlotDef("travelers", "Number of travelers", True, ("1", "2", "3", "4")),
        ),
        (
            IntentDef("FindBus", "Find a bus journey", False, ("from_location", "to_location", "leaving_date"), ("travelers",)),
            IntentDef(
                "BuyBusTicket",
                "Buy bus tickets",
                True,
                ("from_location", "to_location", "leaving_date", "leaving_time"),
                ("travelers",),
            ),
        ),
    )


def state(intent: str = "NONE", requested: Sequence[str] = (), **values: str | Sequence[str]) -> DialogueState:
    sv = {k: (v,) if isinstance(v, str) else tuple(v) for k, v in values.items()}
    return DialogueState(intent, tuple(requested), sv)


def spans_of(utterance: str, values: Mapping[str, str]) -> tuple[SlotSpan, ...]:
    out = []
    for slot, v in values.items():
        i = utterance.index(v)
        out.append(SlotSpan(slot, i, i + len(v)))
    return tuple(out)


def user(service: str, utterance: str, st: DialogueState, spans: Mapping[str, str] = {}) -> Turn:
    return Turn(USER, utterance, (Frame(service, spans_of(utterance, spans), (), st),))


def system(service: str, utterance: str, actions: Sequence[Action] = ()) -> Turn:
    return Turn(SYSTEM, utterance, (Frame(service, (), tuple(actions)),))


def dialogue(dialogue_id: str, turns: Sequence[Turn]) -> Dialogue:
    services = []
    for t in turns:
        for f in t.frames:
            if f.service not in services:
                services.append(f.service)
    return Dialogue(dialogue_id, tuple(services), tuple(turns))


def offer_copy_dialogue() -> Dialogue:
    """A bus search where the user accepts the offered 7 am departure."""
    svc = "Buses_1"
    find = dict(from_location="Anaheim", to_location="San Diego", leaving_date="March 3rd")
    return dialogue(
        "bus_offer",
        [
            user(svc, "Can you find a bus from Anaheim to San Diego on March 3rd? It's for a group of 4.",
                 state("FindBus", travelers="4", **find), {k: v for k, v in find.items()}),
            system(svc, "How about a bus with 0 stops, departing at 7 am, and costs $29?",
                   [Action("OFFER", "leaving_time", ("7 am",))]),
            user(svc, "Okay, what bus station is it leaving from? What bus station am I arriving at?",
                 state("FindBus", travelers="4", **find)),
            system(svc, "The destination station is Santa Fe Depot and you will be departing from Downtown Station.",
                   [Action("INFORM", "to_location", ("Santa Fe Depot",))]),
            user(svc, "Sounds great. Book the bus.",
                 state("BuyBusTicket", travelers="4", leaving_time="7 am", **find)),
        ],
    )


def car_then_bus_dialogue() -> Dialogue:
    """A car reservation in NYC followed by a bus to get there."""
    cars, bus = "RentalCars_1", "Buses_1"
    car_state = state("ReserveCar", pickup_city="NYC", pickup_date="March 11th")
    return dialogue(
        "car_then_bus",
        [
            user(cars, "I need a car in NYC on March 11th.", car_state, {"pickup_city": "NYC", "pickup_date": "March 11th"}),
            system(cars, "Your car has been reserved in NYC.",
                   [Action("NOTIFY_SUCCESS"), Action("INFORM", "pickup_city", ("NYC",))]),
            user(cars, "That's good.", car_state),
            system(cars, "Would you want to get there by taxi?", [Action("OFFER_INTENT", "intent", ("GetRide",))]),
            user(bus, "No. I'd like a bus to get there.", state("FindBus", to_location="NYC")),
        ],
    )


class StubPredictor:
    """Scripted model outputs keyed by (turn index, example name).

    ``intents`` maps a turn to the intent that gets most of the mass; span
    entries give the literal user-utterance text to point at; the binary
    tasks return the scripted probability or ``floor``.
    """

    def __init__(
        self,
        dialogue: Dialogue,
        intents: Mapping[int, str],
        categorical: Mapping[tuple[int, str], str] = {},
        freeform: Mapping[tuple[int, str], str] = {},
        requested: Mapping[tuple[int, str], float] = {},
        indomain: Mapping[tuple[int, str], float] = {},
        crossdomain: Mapping[tuple[int, str], float] = {},
        peak: float = 0.95,
        floor: float = 0.01,
    ):
        self.dialogue = dialogue
        self.tables = {
            "intent": intents,
            "categorical": categorical,
            "freeform": freeform,
            "requested": requested,
            "indomain_transfer": indomain,
            "crossdomain_transfer": crossdomain,
        }
        self.peak, self.floor = peak, floor
        self.calls: list[tuple[str, tuple]] = []

    def _peaked(self, ids, chosen):
        import numpy as np

        rest = (1.0 - self.peak) / max(1, len(ids) - 1)
        return np.array([self.peak if c == chosen else rest for c in ids])

    def _span(self, ex, text):
        import numpy as np

        n = len(ex)
        ps, pe = np.zeros(n), np.zeros(n)
        if text is None:
            ps[ex.layout.null_position] = pe[ex.layout.null_position] = 1.0
            return ps, pe
        utterance = self.dialogue.turns[ex.provenance[1]].utterance
        a = utterance.index(text)
        b = a + len(text)
        usr = range(*ex.layout.usr_span)
        i = next(k for k in usr if ex.char_offsets[k][0] == a)
        j = next(k for k in usr if ex.char_offsets[k][1] == b)
        ps[i] = pe[j] = self.peak
        ps[ex.layout.null_position] = pe[ex.layout.null_position] = 1.0 - self.peak
        return ps, pe

    def predict(self, task, examples: Sequence) -> list:
        out = []
        table = self.tables[task.value]
        for ex in examples:
            _, turn, _, name = ex.provenance
            self.calls.append((task.value, ex.provenance))
            if task.value == "intent":
                out.append(self._peaked(ex.layout.candidate_ids, table[turn]))
            elif task.value == "categorical":
                out.append(self._peaked(ex.layout.candidate_ids, table.get((turn, name), "[NULL]")))
            elif task.value == "freeform":
                out.append(self._span(ex, table.get((turn, name))))
            else:
                out.append(table.get((turn, name), self.floor))
        return out
