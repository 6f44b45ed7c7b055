"""
Documentation for the ipsm_fuzz package

A stateful greybox fuzzer for network protocol servers. It replays
captured request sequences, learns the protocol state machine the server
implements from its response codes, and uses state and code coverage to
decide which sequences to keep and which states to fuzz.

"""

__version__ = "0.1.0.dev0"
