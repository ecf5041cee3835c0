"""Market data: ingestion, alignment, splitting, windowing and synthesis."""
from evamp.market.ingest import (
    cap_buckets_or_default, ingest_cap_buckets, ingest_events, ingest_prices, realized_after,
    write_cap_metadata, write_events, write_prices,
)
from evamp.market.prep import ShortSeriesWarning, make_windows, split_by_ticker, split_counts
from evamp.market.synth import (
    Scenario, SyntheticMarket, amplification_profile, load_scenario, synth_market,
)
from evamp.market.types import (
    CHANNELS, AlignedSeries, CapBucket, CapThresholds, EventRecord, Rejection, WindowSample,
)
