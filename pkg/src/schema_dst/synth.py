"""Template generator for small, exactly-labelled schema-guided corpora.

Every dialogue walks one or two services through search, optional
alternatives and questions, booking and confirmation. The gold states are
produced by the same carry-forward and intent-filtering rules the tracker
applies, so a perfect set of task models reproduces them exactly. The
generator covers all six tasks:

- categorical and free-form values spoken by the user;
- requested slots answered by the system;
- in-domain transfers (accepting a value the system offered);
- cross-service transfers (a later service reusing the earlier place/date).
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .data import (
    NONE_INTENT,
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
    validate_dialogue,
)

CITIES = (
    "San Francisco", "New York", "Los Angeles", "Seattle", "Portland", "Chicago", "Denver",
    "Boston", "Austin", "San Diego", "Phoenix", "Atlanta", "Miami", "Sacramento", "Fresno",
    "Vancouver", "Toronto", "Las Vegas", "Philadelphia", "Long Beach", "Anaheim", "Oakland",
)
DATES = tuple(
    f"{month} {day}"
    for month in ("March", "April", "May")
    for day in ("1st", "3rd", "5th", "8th", "11th", "14th", "19th", "22nd", "27th")
) + ("tomorrow", "next Monday", "this Friday", "the day after tomorrow")


@dataclass(frozen=True)
class ServiceTemplate:
    """One service's schema plus the phrasing the generator uses for it.

    ``roles`` maps generator roles (place, date, item, cat, info and,
    optionally, origin) to slot names.
    """

    schema: ServiceSchema
    roles: Mapping[str, str]
    find: str
    transact: str
    items: tuple[str, ...]
    infos: tuple[str, ...]
    find_full: tuple[str, ...]
    find_place: tuple[str, ...]
    follow_up: tuple[str, ...]
    follow_up_explicit: tuple[str, ...]
    ask_date: str
    cat_phrase: tuple[str, ...]
    offer: tuple[str, ...]
    info_question: tuple[str, ...]
    info_answer: str
    book_explicit: tuple[str, ...]
    confirm: str
    success: str

    @property
    def name(self) -> str:
        return self.schema.service_name

    def slot(self, role: str) -> str:
        return self.roles[role]


def _free(name, description):
    return SlotDef(name, description, False, ())


def _cat(name, description, values):
    return SlotDef(name, description, True, tuple(values))


def _service(name, description, slots, find, transact):
    (fn, fd, freq, fopt), (tn, td, treq, topt) = find, transact
    intents = (
        IntentDef(fn, fd, False, tuple(freq), tuple(fopt)),
        IntentDef(tn, td, True, tuple(treq), tuple(topt)),
    )
    return ServiceSchema(name, description, tuple(slots), intents)


RENTAL_CARS = ServiceTemplate(
    schema=_service(
        "RentalCars_1",
        "Car rental service with locations in many cities",
        [
            _free("pickup_city", "City where the rental car is picked up"),
            _free("pickup_date", "Date the car rental starts"),
            _cat("car_type", "Category of the rental car", ["Compact", "Sedan", "SUV"]),
            _free("car_name", "Model of the rental car"),
            _free("total_price", "Total cost of the rental"),
        ],
        ("GetCarsAvailable", "Find cars available for rent", ["pickup_city", "pickup_date"], ["car_type"]),
        ("ReserveCar", "Reserve a rental car", ["pickup_city", "pickup_date", "car_name"], ["car_type"]),
    ),
    roles={"place": "pickup_city", "date": "pickup_date", "item": "car_name", "cat": "car_type", "info": "total_price"},
    find="GetCarsAvailable",
    transact="ReserveCar",
    items=("Toyota Camry", "Honda Accord", "Ford Escape", "Chevrolet Malibu", "Kia Soul", "Nissan Altima",
           "Mazda 3", "Hyundai Elantra", "Jeep Cherokee", "Subaru Outback"),
    infos=tuple(f"${n}" for n in (96, 112, 134, 148, 175, 189, 210, 236)),
    find_full=(
        "I need a rental car in {place} starting {date}.",
        "Can you find me a car to rent in {place} on {date}?",
        "I'd like to rent a car from {place} on {date}.",
        "I want to pick up a rental car in {place} on {date}.",
    ),
    find_place=(
        "I need to rent a car in {place}.",
        "Can you find me a rental car in {place}?",
    ),
    follow_up=(
        "I will also need a rental car there on the same day.",
        "Can you also get me a car to rent there that day?",
    ),
    follow_up_explicit=(
        "I also need a rental car in {place} on {date}.",
        "Can you also find me a car to rent in {place} on {date}?",
    ),
    ask_date="What day would you like to pick up the car?",
    cat_phrase=("I'd prefer a {cat}.", "A {cat} would be best."),
    offer=("I found a {item} you can pick up in {place}.", "How about a {item}? It is available in {place}."),
    info_question=("How much will it cost in total?", "What is the total price?"),
    info_answer="The total comes to {info}.",
    book_explicit=("Please reserve the {item}.", "I'll take the {item}, book it please."),
    confirm="Please confirm: a {item} picked up in {place} on {date}.",
    success="Your car has been reserved.",
)

BUSES = ServiceTemplate(
    schema=_service(
        "Buses_1",
        "Book bus journeys between cities",
        [
            _free("from_location", "City the bus leaves from"),
            _free("to_location", "City the bus goes to"),
            _free("leaving_date", "Date of the bus journey"),
            _free("leaving_time", "Departure time of the bus"),
            _cat("fare_type", "Type of bus ticket", ["Economy", "Flexible", "Premium"]),
            _free("fare", "Price of one bus ticket"),
        ],
        ("FindBus", "Search for a bus itinerary", ["from_location", "to_location", "leaving_date"], ["fare_type"]),
        (
            "BuyBusTicket",
            "Buy tickets for a bus journey",
            ["from_location", "to_location", "leaving_date", "leaving_time"],
            ["fare_type"],
        ),
    ),
    roles={
        "place": "to_location",
        "origin": "from_location",
        "date": "leaving_date",
        "item": "leaving_time",
        "cat": "fare_type",
        "info": "fare",
    },
    find="FindBus",
    transact="BuyBusTicket",
    items=("7 am", "7:30 am", "8:15 am", "9 am", "10:40 am", "11 am", "12:30 pm", "1:10 pm", "2 pm",
           "3:45 pm", "5 pm", "6:20 pm"),
    infos=tuple(f"${n}" for n in (19, 23, 28, 31, 36, 42, 47, 55)),
    find_full=(
        "I need a bus from {origin} to {place} on {date}.",
        "Can you find me a bus going from {origin} to {place} on {date}?",
        "I want to travel by bus from {origin} to {place} on {date}.",
    ),
    find_place=(
        "I need a bus from {origin} to {place}.",
        "Find me a bus from {origin} to {place} please.",
    ),
    follow_up=(
        "I'll also need a bus from {origin} to get there on the same day.",
        "Can you also find me a bus from {origin} to there that day?",
    ),
    follow_up_explicit=(
        "I also need a bus from {origin} to {place} on {date}.",
        "Can you also find me a bus from {origin} to {place} on {date}?",
    ),
    ask_date="What day are you traveling?",
    cat_phrase=("I want a {cat} ticket.", "Make it a {cat} fare."),
    offer=("There is a bus leaving at {item}.", "I found a bus that departs at {item}."),
    info_question=("How much is a ticket?", "What does the ticket cost?"),
    info_answer="A ticket is {info}.",
    book_explicit=("I'll take the {item} bus.", "Book the {item} one please."),
    confirm="Please confirm: a bus from {origin} to {place} on {date} at {item}.",
    success="Your ticket has been booked.",
)

RESTAURANTS = ServiceTemplate(
    schema=_service(
        "Restaurants_1",
        "Find and reserve tables at restaurants",
        [
            _free("city", "City where the restaurant is located"),
            _free("date", "Date of the restaurant booking"),
            _cat("price_range", "Price range of the restaurant", ["cheap", "moderate", "pricey"]),
            _free("restaurant_name", "Name of the restaurant"),
            _free("phone_number", "Phone number of the restaurant"),
        ],
        ("FindRestaurants", "Find a restaurant to eat at", ["city"], ["price_range", "date"]),
        ("ReserveRestaurant", "Reserve a table at a restaurant", ["city", "date", "restaurant_name"], ["price_range"]),
    ),
    roles={"place": "city", "date": "date", "item": "restaurant_name", "cat": "price_range", "info": "phone_number"},
    find="FindRestaurants",
    transact="ReserveRestaurant",
    items=("Sushi Ran", "Bella Vista", "The Grill House", "Golden Dragon", "Taqueria Cancun", "Cafe Rouge",
           "The Blue Plate", "Spice Route", "Marlowe", "Nopa"),
    infos=("415-555-0134", "212-555-0188", "310-555-0172", "206-555-0111", "503-555-0145", "312-555-0190"),
    find_full=(
        "I want to eat out in {place} on {date}.",
        "Find me a restaurant in {place} for {date}.",
        "Can you look for a place to eat in {place} on {date}?",
    ),
    find_place=("I'm looking for a restaurant in {place}.", "Can you find somewhere to eat in {place}?"),
    follow_up=(
        "Can you also find me a restaurant there for that day?",
        "I'd also like to eat out there on the same day.",
    ),
    follow_up_explicit=(
        "I also want a restaurant in {place} on {date}.",
        "Can you also find me somewhere to eat in {place} on {date}?",
    ),
    ask_date="What day would you like to go?",
    cat_phrase=("Something {cat} please.", "I'd like it to be {cat}."),
    offer=("How about {item}? It is a nice place in {place}.", "I found {item} in {place}."),
    info_question=("What is their phone number?", "Can I get their phone number?"),
    info_answer="Their number is {info}.",
    book_explicit=("Please book a table at {item}.", "Reserve {item} for me."),
    confirm="Please confirm: a table at {item} in {place} on {date}.",
    success="Your table is reserved.",
)

HOTELS = ServiceTemplate(
    schema=_service(
        "Hotels_1",
        "Search and book hotel rooms",
        [
            _free("location", "City where the hotel is located"),
            _free("check_in_date", "Date of check in"),
            _cat("star_rating", "Star rating of the hotel", ["3", "4", "5"]),
            _free("hotel_name", "Name of the hotel"),
            _free("street_address", "Address of the hotel"),
        ],
        ("SearchHotel", "Find a hotel to stay at", ["location", "check_in_date"], ["star_rating"]),
        ("ReserveHotel", "Book a room at a hotel", ["location", "check_in_date", "hotel_name"], ["star_rating"]),
    ),
    roles={"place": "location", "date": "check_in_date", "item": "hotel_name", "cat": "star_rating", "info": "street_address"},
    find="SearchHotel",
    transact="ReserveHotel",
    items=("Hilton Garden Inn", "Ace Hotel", "The Westin", "Hyatt Place", "Hotel Zephyr", "Marriott Downtown",
           "Holiday Inn Express", "Best Western Plus", "Hotel Nikko", "The Standard"),
    infos=("12 Main Street", "480 Pine Avenue", "77 Ocean Drive", "215 Market Street", "9 Harbor Way", "301 Elm Road"),
    find_full=(
        "I need a hotel in {place} checking in {date}.",
        "Find me a hotel room in {place} from {date}.",
        "Can you look for a hotel in {place} on {date}?",
    ),
    find_place=("I need a hotel in {place}.", "Can you find me somewhere to stay in {place}?"),
    follow_up=(
        "I also need a hotel there starting that day.",
        "Can you also find me a place to stay there from the same day?",
    ),
    follow_up_explicit=(
        "I also need a hotel in {place} from {date}.",
        "Can you also find me a hotel room in {place} on {date}?",
    ),
    ask_date="When do you want to check in?",
    cat_phrase=("It should have {cat} stars.", "I want a {cat} star hotel."),
    offer=("How about {item} in {place}?", "I found {item}, a hotel in {place}."),
    info_question=("What is the address?", "Where is it located?"),
    info_answer="It is at {info}.",
    book_explicit=("Please book {item}.", "Reserve a room at {item}."),
    confirm="Please confirm: a room at {item} in {place} from {date}.",
    success="Your room has been booked.",
)

SERVICE_POOL = (RENTAL_CARS, BUSES, RESTAURANTS, HOTELS)

GREETINGS = ("Hi, could you help me with something?", "Hello there.", "Hi, I need some help.")
GREETING_REPLY = "Sure, what can I do for you?"
DATE_ANSWERS = ("{date} please.", "On {date}.", "I want it on {date}.")
ALTERNATIVES = ("Are there any other options?", "Can you find something else?", "What else is there?")
ALTERNATIVES_CAT = ("Do you have a {cat} option instead?", "Anything {cat} instead?")
BOOK = ("That sounds good, please book it.", "Great, reserve it for me.", "Yes, I want to book that.")
AFFIRM = ("Yes, that's right.", "Yes please.", "Correct.")
MORE = " Is there anything else I can help with?"
CLOSE = ("No, that's all. Thank you.", "That's everything, thanks.")
GOODBYE = "Have a great day."

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


def render(template: str, fill: Mapping[str, tuple[str, str]]) -> tuple[str, list[SlotSpan]]:
    """Fill ``{role}`` placeholders; ``fill`` maps role -> (slot, value). Returns text and spans."""
    out, spans, pos = [], [], 0
    length = 0
    for m in _PLACEHOLDER.finditer(template):
        lit = template[pos : m.start()]
        out.append(lit)
        length += len(lit)
        slot, value = fill[m.group(1)]
        spans.append(SlotSpan(slot, length, length + len(value)))
        out.append(value)
        length += len(value)
        pos = m.end()
    out.append(template[pos:])
    return "".join(out), spans


@dataclass(frozen=True)
class SynthConfig:
    n_dialogues: int = 200
    n_services: int = 2
    seed: int = 0
    multi_service_rate: float = 0.7
    follow_up_transfer_rate: float = 0.75
    categorical_rate: float = 0.8
    id_prefix: str = "synth"

    def __post_init__(self):
        if self.n_dialogues < 0:
            raise ValueError("n_dialogues must be >= 0")
        if not 1 <= self.n_services <= len(SERVICE_POOL):
            raise ValueError(f"n_services must be in [1, {len(SERVICE_POOL)}]")


class _DialogueBuilder:
    def __init__(self, dialogue_id: str, rng: random.Random):
        self.dialogue_id = dialogue_id
        self.rng = rng
        self.turns: list[Turn] = []
        self.services: list[str] = []
        self.states: dict[str, DialogueState] = {}

    def pick(self, options: Sequence[str]) -> str:
        return self.rng.choice(tuple(options))

    def user(
        self,
        tpl: ServiceTemplate,
        template: str,
        fill: Mapping[str, str],
        intent: str,
        updates: Mapping[str, str] = {},
        requested: Sequence[str] = (),
    ) -> None:
        text, spans = render(template, {r: (tpl.slot(r), v) for r, v in fill.items()})
        schema = tpl.schema
        prev = self.states.get(tpl.name)
        values = dict(prev.slot_values) if prev is not None else {}
        values.update({tpl.slot(r): (v,) for r, v in updates.items()})
        allowed = schema.intent(intent).allowed_slots if intent != NONE_INTENT else frozenset()
        values = {s: values[s] for s in schema.slot_names if s in values and s in allowed}
        req = tuple(s for s in schema.slot_names if s in {tpl.slot(r) for r in requested})
        state = DialogueState(intent, req, values)
        self.states[tpl.name] = state
        if tpl.name not in self.services:
            self.services.append(tpl.name)
        self.turns.append(Turn(USER, text, (Frame(tpl.name, tuple(spans), (), state),)))

    def system(self, tpl: ServiceTemplate, template: str, fill: Mapping[str, str], actions: Sequence[Action]) -> None:
        text, spans = render(template, {r: (tpl.slot(r), v) for r, v in fill.items()})
        self.turns.append(Turn(SYSTEM, text, (Frame(tpl.name, tuple(spans), tuple(actions)),)))

    def build(self) -> Dialogue:
        return Dialogue(self.dialogue_id, tuple(self.services), tuple(self.turns))


def _segment(
    b: _DialogueBuilder,
    tpl: ServiceTemplate,
    previous: tuple[str, str] | None,
    transfer: bool,
    last: bool,
    greet: bool,
    categorical_rate: float = 0.8,
) -> tuple[str, str]:
    """One service from search to confirmed booking; returns its (place, date)."""
    rng = b.rng
    s = tpl.slot
    pick = b.pick
    place, date = pick(CITIES), pick(DATES)
    if previous is not None and transfer:
        place, date = previous
    elif previous is not None:
        place = pick([c for c in CITIES if c != previous[0]])
        date = pick([d for d in DATES if d != previous[1]])
    origin = pick([c for c in CITIES if c != place]) if "origin" in tpl.roles else None
    cat = pick(tpl.schema.slot(s("cat")).possible_values)
    with_origin = {"origin": origin} if origin else {}

    if greet:
        b.user(tpl, pick(GREETINGS), {}, NONE_INTENT)
        b.system(tpl, GREETING_REPLY, {}, [Action("REQ_MORE")])

    if previous is not None and transfer:
        # place and date are never spoken: both carry over from the previous service
        b.user(
            tpl, pick(tpl.follow_up), with_origin, tpl.find, {"place": place, "date": date, **with_origin}
        )
    else:
        if previous is not None:
            template, spoken = pick(tpl.follow_up_explicit), {"place": place, "date": date}
        elif rng.random() < 0.35:
            template, spoken = pick(tpl.find_place), {"place": place}
        else:
            template, spoken = pick(tpl.find_full), {"place": place, "date": date}
        spoken.update(with_origin)
        cat_spoken = rng.random() < categorical_rate
        if cat_spoken:
            template = template + " " + pick(tpl.cat_phrase)
            spoken["cat"] = cat
        b.user(tpl, template, spoken, tpl.find, spoken)
        if "date" not in spoken:
            b.system(tpl, tpl.ask_date, {}, [Action("REQUEST", s("date"))])
            b.user(tpl, pick(DATE_ANSWERS), {"date": date}, tpl.find, {"date": date})

    items = list(tpl.items)
    rng.shuffle(items)
    offer_fill = {"place": place, "item": items.pop()}

    def offer():
        b.system(
            tpl,
            pick(tpl.offer),
            offer_fill,
            [Action("OFFER", s("item"), (offer_fill["item"],)), Action("INFORM", s("place"), (place,))],
        )

    offer()
    while rng.random() < 0.35 and len(items) > 1:
        if rng.random() < categorical_rate:
            new_cat = pick([c for c in tpl.schema.slot(s("cat")).possible_values if c != cat])
            b.user(tpl, pick(ALTERNATIVES_CAT), {"cat": new_cat}, tpl.find, {"cat": new_cat})
            cat = new_cat
        else:
            b.user(tpl, pick(ALTERNATIVES), {}, tpl.find)
        offer_fill = {"place": place, "item": items.pop()}
        offer()

    if rng.random() < 0.5:
        info = pick(tpl.infos)
        b.user(tpl, pick(tpl.info_question), {}, tpl.find, requested=["info"])
        b.system(tpl, tpl.info_answer, {"info": info}, [Action("INFORM", s("info"), (info,))])

    item = offer_fill["item"]
    if rng.random() < 0.3:
        b.user(tpl, pick(tpl.book_explicit), {"item": item}, tpl.transact, {"item": item})
    else:
        b.user(tpl, pick(BOOK), {}, tpl.transact, {"item": item})

    confirm_fill = {"place": place, "date": date, "item": item, **with_origin}
    roles = [r for r in ("origin", "place", "date", "item") if r in confirm_fill]
    b.system(
        tpl, tpl.confirm, confirm_fill, [Action("CONFIRM", s(r), (confirm_fill[r],)) for r in roles]
    )
    b.user(tpl, pick(AFFIRM), {}, tpl.transact)
    b.system(tpl, tpl.success + MORE, {}, [Action("NOTIFY_SUCCESS"), Action("REQ_MORE")])
    if last:
        b.user(tpl, pick(CLOSE), {}, tpl.transact)
        b.system(tpl, GOODBYE, {}, [Action("GOODBYE")])
    return place, date


def synth_schemas(n_services: int = 2) -> list[ServiceSchema]:
    return [t.schema for t in SERVICE_POOL[:n_services]]


def synth_dialogue(dialogue_id: str, templates: Sequence[ServiceTemplate], rng: random.Random, config: SynthConfig) -> Dialogue:
    b = _DialogueBuilder(dialogue_id, rng)
    if len(templates) > 1 and rng.random() < config.multi_service_rate:
        chosen = rng.sample(list(templates), 2)
    else:
        chosen = [rng.choice(list(templates))]
    previous = None
    for k, tpl in enumerate(chosen):
        transfer = previous is not None and rng.random() < config.follow_up_transfer_rate
        previous = _segment(
            b, tpl, previous, transfer, last=k == len(chosen) - 1, greet=k == 0 and rng.random() < 0.3,
            categorical_rate=config.categorical_rate,
        )
    return b.build()


def synth_corpus(config: SynthConfig = SynthConfig()) -> tuple[list[ServiceSchema], list[Dialogue]]:
    """Schemas and dialogues; identical for identical configs."""
    rng = random.Random(config.seed)
    templates = SERVICE_POOL[: config.n_services]
    schemas = [t.schema for t in templates]
    index = {s.service_name: s for s in schemas}
    dialogues = []
    for k in range(config.n_dialogues):
        d = synth_dialogue(f"{config.id_prefix}_{k:05d}", templates, rng, config)
        validate_dialogue(d, index)
        dialogues.append(d)
    return schemas, dialogues
