"""Word lists and colors used by the synthetic world."""

PALETTE = {
    "red": (220, 40, 40),
    "orange": (240, 140, 30),
    "yellow": (235, 220, 50),
    "lime": (160, 230, 40),
    "green": (40, 160, 60),
    "teal": (30, 140, 130),
    "cyan": (60, 220, 230),
    "azure": (70, 150, 240),
    "blue": (40, 60, 210),
    "violet": (130, 80, 220),
    "purple": (110, 30, 130),
    "magenta": (220, 50, 200),
    "pink": (250, 160, 190),
    "brown": (120, 75, 40),
    "white": (245, 245, 245),
    "black": (20, 20, 25),
}
COLOR_NAMES = tuple(PALETTE)

NOUNS = tuple(
    """
    tree bush hedge lawn flowerbed palm oak pine birch willow
    building house tower church chapel school hospital hotel shop store
    cafe bakery pharmacy bank library museum theater cinema stadium garage
    warehouse factory barn shed cabin kiosk pavilion gazebo greenhouse bungalow
    car bus truck van taxi tram bicycle motorcycle scooter trailer
    pole lamppost streetlight pylon antenna chimney mast flagpole bollard hydrant
    sign billboard banner poster mural statue fountain monument obelisk sculpture
    fence wall gate railing barrier archway bridge tunnel overpass staircase
    bench bin mailbox phonebooth shelter booth planter bicyclerack parkingmeter container
    crane scaffold dumpster pallet crate barrel ladder tent umbrella awning
    window door balcony porch terrace veranda garden courtyard plaza square
    market stall carousel playground swing slide sandbox pond lake canal
    hill rock boulder cliff meadow field orchard vineyard forest grove
    station platform depot hangar silo windmill lighthouse dock pier harbor
    """.split()
)

# Semantic classes: 0 ground, 1 sky, 2..6 static landmark categories, 7 transient objects.
GROUND_CLASS = 0
SKY_CLASS = 1
LANDMARK_CLASSES = (2, 3, 4, 5, 6)
TRANSIENT_CLASS = 7
NUM_CLASSES = 8


def noun_class(noun_index: int) -> int:
    return LANDMARK_CLASSES[noun_index % len(LANDMARK_CLASSES)]
