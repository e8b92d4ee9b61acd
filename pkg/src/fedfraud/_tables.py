"""Static lookup tables bundled with the generator."""

# (city, latitude, longitude) of real on-land locations
CITIES = (
    ("New York", 40.7128, -74.0060),
    ("Chicago", 41.8781, -87.6298),
    ("Houston", 29.7604, -95.3698),
    ("Phoenix", 33.4484, -112.0740),
    ("Denver", 39.7392, -104.9903),
    ("Seattle", 47.6062, -122.3321),
    ("Atlanta", 33.7490, -84.3880),
    ("Boston", 42.3601, -71.0589),
    ("Toronto", 43.6532, -79.3832),
    ("Montreal", 45.5017, -73.5673),
    ("Mexico City", 19.4326, -99.1332),
    ("Sao Paulo", -23.5505, -46.6333),
    ("Buenos Aires", -34.6037, -58.3816),
    ("Lima", -12.0464, -77.0428),
    ("London", 51.5074, -0.1278),
    ("Paris", 48.8566, 2.3522),
    ("Frankfurt", 50.1109, 8.6821),
    ("Zurich", 47.3769, 8.5417),
    ("Madrid", 40.4168, -3.7038),
    ("Milan", 45.4642, 9.1900),
    ("Stockholm", 59.3293, 18.0686),
    ("Oslo", 59.9139, 10.7522),
    ("Warsaw", 52.2297, 21.0122),
    ("Istanbul", 41.0082, 28.9784),
    ("Cairo", 30.0444, 31.2357),
    ("Lagos", 6.5244, 3.3792),
    ("Nairobi", -1.2921, 36.8219),
    ("Johannesburg", -26.2041, 28.0473),
    ("Dubai", 25.2048, 55.2708),
    ("Mumbai", 19.0760, 72.8777),
    ("Delhi", 28.7041, 77.1025),
    ("Singapore", 1.3521, 103.8198),
    ("Hong Kong", 22.3193, 114.1694),
    ("Shanghai", 31.2304, 121.4737),
    ("Beijing", 39.9042, 116.4074),
    ("Seoul", 37.5665, 126.9780),
    ("Tokyo", 35.6762, 139.6503),
    ("Sydney", -33.8688, 151.2093),
    ("Melbourne", -37.8136, 144.9631),
    ("Auckland", -36.8485, 174.7633),
)

FIRST_NAMES = (
    "Ada", "Ben", "Chloe", "Daniel", "Elena", "Farid", "Grace", "Hiro", "Ines",
    "Jonas", "Kira", "Liam", "Maya", "Noah", "Olga", "Pedro", "Quinn", "Rosa",
    "Sami", "Tara", "Uma", "Viktor", "Wen", "Ximena", "Yusuf", "Zoe",
)
LAST_NAMES = (
    "Abara", "Becker", "Costa", "Dubois", "Eriksen", "Fischer", "Garcia", "Haddad",
    "Ivanova", "Jensen", "Kim", "Lopez", "Moreau", "Nakamura", "Okafor", "Patel",
    "Quispe", "Rossi", "Santos", "Tanaka", "Ueda", "Varga", "Wang", "Yilmaz", "Zhou",
)

# Units of currency per 1 USD; a fixed snapshot is all the generator needs.
USD_RATES = {
    "USD": 1.0,
    "EUR": 0.92,
    "GBP": 0.79,
    "JPY": 149.5,
    "CHF": 0.88,
    "CAD": 1.36,
    "AUD": 1.52,
    "CNY": 7.24,
    "SEK": 10.5,
    "NOK": 10.6,
}
CURRENCIES = tuple(USD_RATES)
HOME_CURRENCY_PROB = 0.7


def exchange_rate(src: str, dst: str) -> float:
    """Units of ``dst`` per unit of ``src``; exactly 1.0 for same-currency pairs."""
    if src == dst:
        return 1.0
    return USD_RATES[dst] / USD_RATES[src]
