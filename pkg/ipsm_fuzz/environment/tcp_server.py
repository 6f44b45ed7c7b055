"""
Serve a bench server over TCP, one fresh session per connection. The
planted crashes abort the whole process, which is what a tcp target
adapter has to detect.
"""
import logging
import os
import socketserver

from ipsm_fuzz.environment.bench_servers import BUILTIN_SERVERS, make_server
from ipsm_fuzz.utils.protocol_codec import CodecError, get_codec, \
    split_requests

logger = logging.getLogger(__name__)


class BenchRequestHandler(socketserver.BaseRequestHandler):
    """ Frames the incoming byte stream into requests with the codec of the
    bench server and answers each one as soon as it is complete. """

    def handle(self) -> None:
        server = make_server(self.server.bench_name)
        codec = get_codec(server.CODEC)
        banner = server.reset()
        if banner:
            self.request.sendall(banner)

        pending = b''
        while not server.closed:
            try:
                chunk = self.request.recv(4096)
            except ConnectionError:
                return
            if not chunk:
                return
            pending += chunk
            try:
                seq = split_requests(codec, pending)
            except CodecError:
                continue
            consumed = 0
            for region in seq.regions:
                if region.incomplete:
                    break
                message = pending[region.start:region.end]
                consumed = region.end
                response, _, crashed = server.handle(message)
                if crashed:
                    logger.error("planted crash reached, aborting")
                    os.abort()
                if response:
                    self.request.sendall(response)
                if server.closed:
                    break
            pending = pending[consumed:]


class BenchTCPServer(socketserver.TCPServer):
    allow_reuse_address = True

    def __init__(self, bench_name: str, host: str, port: int) -> None:
        if bench_name not in BUILTIN_SERVERS:
            raise ValueError(f"unknown builtin server '{bench_name}', choose "
                             f"one of {sorted(BUILTIN_SERVERS)}")
        self.bench_name = bench_name
        super(BenchTCPServer, self).__init__((host, port),
                                             BenchRequestHandler)


def serve(bench_name: str, host: str = '127.0.0.1', port: int = 2121) -> None:
    """ Block serving connections until interrupted. """
    with BenchTCPServer(bench_name, host, port) as server:
        logger.info("serving builtin:%s on %s:%d", bench_name, host, port)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            logger.info("bench server stopped")
