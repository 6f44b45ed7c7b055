from typing import Dict, List, Optional, Tuple, Type

import gym

# Response of a server to one message: bytes sent back, instrumented
# branches taken (dense ids), crash flag.
HandleResult = Tuple[bytes, List[int], bool]


class ServerCrashedError(RuntimeError):
    pass


class BenchServer(gym.Env):
    """ Deterministic in-process protocol server with explicit branch
    instrumentation. A session starts with reset() and is driven one request
    at a time with handle() (or the gym-style step()).

    Subclasses list their instrumented branches in BRANCHES; the position of
    a name in that tuple is its dense branch id. """
    BRANCHES: Tuple[str, ...] = ()
    COMMANDS: Tuple[str, ...] = ()
    STATUS_CODES: Tuple[int, ...] = ()
    CODEC = ''

    def __init__(self) -> None:
        super(BenchServer, self).__init__()
        self._branch_ids: Dict[str, int] = {
            name: i for i, name in enumerate(self.BRANCHES)}
        self.action_space = gym.spaces.Discrete(len(self.COMMANDS))
        self.observation_space = gym.spaces.Discrete(len(self.STATUS_CODES))
        self._trace: List[int] = []
        self.crashed = False
        self.closed = False
        self.last_code: Optional[int] = None

    @classmethod
    def edge_count(cls) -> int:
        """ Total number of instrumented branches. """
        return len(cls.BRANCHES)

    def reset(self) -> bytes:
        """ Start a fresh session.
        :return the greeting the server sends on connect (may be empty) """
        self.crashed = False
        self.closed = False
        self.last_code = None
        self._reset_session()
        return self.banner()

    def banner(self) -> bytes:
        return b''

    def handle(self, message: bytes) -> HandleResult:
        """ Process one request.
        :param message: one request, framing included
        :return response bytes, branch ids hit, crash flag """
        if self.crashed:
            raise ServerCrashedError(
                f"{type(self).__name__} already crashed; reset it first")
        if self.closed:
            return b'', [], False
        self._trace = []
        response = self._dispatch(message)
        return response, self._trace, self.crashed

    def step(self, message: bytes) -> Tuple[int, float, bool, Dict]:
        """ gym-style wrapper around handle().
        :return index of the last status code in STATUS_CODES, zero reward,
        whether the session ended (closed or crashed), and a dictionary with
        the raw response, branches and crash flag """
        response, branches, crashed = self.handle(message)
        obs = self.STATUS_CODES.index(self.last_code) \
            if self.last_code in self.STATUS_CODES else 0
        done = crashed or self.closed
        info = {'response': response, 'branches': branches,
                'crashed': crashed}
        return obs, 0., done, info

    def _hit(self, branch: str) -> None:
        self._trace.append(self._branch_ids[branch])

    def _abort(self, branch: str) -> bytes:
        self._hit(branch)
        self.crashed = True
        return b''

    def _reset_session(self) -> None:
        raise NotImplementedError

    def _dispatch(self, message: bytes) -> bytes:
        raise NotImplementedError


class FtpLikeServer(BenchServer):
    """ Small FTP control-channel server. Commands other than USER, PASS,
    NOOP and QUIT need a successful login (password equal to the user
    name). Planted bug: a STOR argument longer than STOR_NAME_LIMIT bytes
    aborts the server once the client has changed into a subdirectory. """
    BRANCHES = (
        'empty_line', 'unknown_cmd',
        'user_noarg', 'user_ok',
        'pass_nouser', 'pass_ok', 'pass_bad',
        'auth_required',
        'mkd_noarg', 'mkd_exists', 'mkd_ok',
        'cwd_noarg', 'cwd_root', 'cwd_up', 'cwd_missing', 'cwd_ok',
        'stor_noarg', 'stor_long_root', 'stor_crash', 'stor_new',
        'stor_overwrite',
        'list_empty', 'list_files',
        'retr_noarg', 'retr_missing', 'retr_ok',
        'dele_noarg', 'dele_missing', 'dele_ok',
        'pwd', 'noop', 'quit',
    )
    COMMANDS = ('USER', 'PASS', 'MKD', 'CWD', 'STOR', 'LIST', 'RETR', 'DELE',
                'PWD', 'NOOP', 'QUIT')
    STATUS_CODES = (150, 200, 220, 221, 226, 230, 250, 257, 331, 500, 501,
                    503, 530, 550, 553)
    CODEC = 'ftp'
    STOR_NAME_LIMIT = 64

    _NEEDS_LOGIN = ('MKD', 'CWD', 'STOR', 'LIST', 'RETR', 'DELE', 'PWD')

    def __init__(self) -> None:
        super(FtpLikeServer, self).__init__()
        self.user: Optional[str] = None
        self.logged_in = False
        self.cwd = '/'
        self.dirs = {'/'}
        self.files: Dict[Tuple[str, str], int] = {}
        self.reset()

    def banner(self) -> bytes:
        self.last_code = 220
        return b'220 FTP-like bench server ready\r\n'

    def _reset_session(self) -> None:
        self.user = None
        self.logged_in = False
        self.cwd = '/'
        self.dirs = {'/'}
        self.files = {}

    def _reply(self, code: int, text: str) -> bytes:
        self.last_code = code
        return f'{code} {text}\r\n'.encode('latin-1')

    def _transfer(self) -> bytes:
        self.last_code = 226
        return (b'150 File status okay\r\n'
                b'226 Transfer complete\r\n')

    def _dispatch(self, message: bytes) -> bytes:
        line = message.decode('latin-1').rstrip('\r\n')
        if not line.strip():
            self._hit('empty_line')
            return self._reply(500, 'Syntax error, command unrecognized.')
        parts = line.split(' ', 1)
        verb = parts[0].upper()
        arg = parts[1].strip() if len(parts) > 1 else ''

        if verb not in self.COMMANDS:
            self._hit('unknown_cmd')
            return self._reply(500, 'Syntax error, command unrecognized.')
        if verb in self._NEEDS_LOGIN and not self.logged_in:
            self._hit('auth_required')
            return self._reply(530, 'Not logged in.')
        return getattr(self, f'_cmd_{verb.lower()}')(arg)

    def _cmd_user(self, arg: str) -> bytes:
        if not arg:
            self._hit('user_noarg')
            return self._reply(501, 'Syntax error in parameters.')
        self._hit('user_ok')
        self.user = arg
        self.logged_in = False
        return self._reply(331, f'User {arg} OK. Password required')

    def _cmd_pass(self, arg: str) -> bytes:
        if self.user is None:
            self._hit('pass_nouser')
            return self._reply(503, 'Bad sequence of commands.')
        if arg == self.user:
            self._hit('pass_ok')
            self.logged_in = True
            return self._reply(230, 'User logged in, proceed.')
        self._hit('pass_bad')
        self.user = None
        return self._reply(530, 'Not logged in.')

    def _cmd_mkd(self, arg: str) -> bytes:
        if not arg:
            self._hit('mkd_noarg')
            return self._reply(501, 'Syntax error in parameters.')
        path = self._resolve(arg)
        if path in self.dirs:
            self._hit('mkd_exists')
            return self._reply(550, 'Directory already exists.')
        self._hit('mkd_ok')
        self.dirs.add(path)
        return self._reply(257, 'Directory created.')

    def _cmd_cwd(self, arg: str) -> bytes:
        if not arg:
            self._hit('cwd_noarg')
            return self._reply(501, 'Syntax error in parameters.')
        if arg == '/':
            self._hit('cwd_root')
            self.cwd = '/'
        elif arg == '..':
            self._hit('cwd_up')
            self.cwd = self.cwd.rsplit('/', 1)[0] or '/'
        else:
            path = self._resolve(arg)
            if path not in self.dirs:
                self._hit('cwd_missing')
                return self._reply(550, 'Directory not found.')
            self._hit('cwd_ok')
            self.cwd = path
        return self._reply(250, 'Requested file action okay, completed.')

    def _cmd_stor(self, arg: str) -> bytes:
        if not arg:
            self._hit('stor_noarg')
            return self._reply(501, 'Syntax error in parameters.')
        if len(arg) > self.STOR_NAME_LIMIT:
            if self.cwd != '/':
                # Planted bug: fixed-size name buffer outside the root.
                return self._abort('stor_crash')
            self._hit('stor_long_root')
            return self._reply(553, 'File name not allowed.')
        key = (self.cwd, arg)
        if key in self.files:
            self._hit('stor_overwrite')
        else:
            self._hit('stor_new')
        self.files[key] = len(arg)
        return self._transfer()

    def _cmd_list(self, arg: str) -> bytes:
        if any(d == self.cwd for d, _ in self.files):
            self._hit('list_files')
        else:
            self._hit('list_empty')
        return self._transfer()

    def _cmd_retr(self, arg: str) -> bytes:
        if not arg:
            self._hit('retr_noarg')
            return self._reply(501, 'Syntax error in parameters.')
        if (self.cwd, arg) not in self.files:
            self._hit('retr_missing')
            return self._reply(550, 'File not found.')
        self._hit('retr_ok')
        return self._transfer()

    def _cmd_dele(self, arg: str) -> bytes:
        if not arg:
            self._hit('dele_noarg')
            return self._reply(501, 'Syntax error in parameters.')
        if (self.cwd, arg) not in self.files:
            self._hit('dele_missing')
            return self._reply(550, 'File not found.')
        self._hit('dele_ok')
        del self.files[(self.cwd, arg)]
        return self._reply(250, 'Requested file action okay, completed.')

    def _cmd_pwd(self, arg: str) -> bytes:
        self._hit('pwd')
        return self._reply(257, f'"{self.cwd}" is the current directory')

    def _cmd_noop(self, arg: str) -> bytes:
        self._hit('noop')
        return self._reply(200, 'Command okay.')

    def _cmd_quit(self, arg: str) -> bytes:
        self._hit('quit')
        self.closed = True
        return self._reply(221, 'Goodbye!')

    def _resolve(self, name: str) -> str:
        if name.startswith('/'):
            return name.rstrip('/') or '/'
        base = '' if self.cwd == '/' else self.cwd
        return f'{base}/{name}'.rstrip('/') or '/'


class HiddenTransitionServer(BenchServer):
    """ RTSP-flavoured media session server with states INIT, READY and
    PLAY. Besides the documented INIT -SETUP-> READY -PLAY-> PLAY path it
    accepts a PLAY carrying a Range header directly in INIT (an undocumented
    shortcut that skips session setup). TEARDOWN of such a session-less
    stream aborts the server. """
    BRANCHES = (
        'bad_request', 'unknown_method',
        'options', 'describe_ok', 'describe_not_found',
        'setup_ok', 'setup_invalid',
        'play_ready', 'play_playing', 'play_init', 'play_shortcut',
        'pause_ok', 'pause_invalid',
        'teardown_ok', 'teardown_no_session', 'teardown_crash',
    )
    COMMANDS = ('OPTIONS', 'DESCRIBE', 'SETUP', 'PLAY', 'PAUSE', 'TEARDOWN')
    STATUS_CODES = (200, 400, 404, 454, 455, 501)
    CODEC = 'rtsp'
    SESSION_ID = '12345678'

    def __init__(self) -> None:
        super(HiddenTransitionServer, self).__init__()
        self.state = 'INIT'
        self.session: Optional[str] = None
        self.shortcut = False
        self.reset()

    def _reset_session(self) -> None:
        self.state = 'INIT'
        self.session = None
        self.shortcut = False

    def _reply(self, code: int, reason: str, cseq: str,
               session: bool = False) -> bytes:
        self.last_code = code
        head = f'RTSP/1.0 {code} {reason}\r\nCSeq: {cseq}\r\n'
        if session and self.session is not None:
            head += f'Session: {self.session}\r\n'
        return (head + '\r\n').encode('latin-1')

    def _dispatch(self, message: bytes) -> bytes:
        text = message.decode('latin-1')
        lines = text.split('\r\n')
        request = lines[0].split(' ')
        headers = {}
        for line in lines[1:]:
            if ':' in line:
                key, value = line.split(':', 1)
                headers[key.strip().lower()] = value.strip()
        cseq = headers.get('cseq', '0')

        if len(request) != 3 or request[2] != 'RTSP/1.0':
            self._hit('bad_request')
            return self._reply(400, 'Bad Request', cseq)
        method, url, _ = request
        if method not in self.COMMANDS:
            self._hit('unknown_method')
            return self._reply(501, 'Not Implemented', cseq)
        return getattr(self, f'_req_{method.lower()}')(url, headers, cseq)

    def _req_options(self, url: str, headers: Dict, cseq: str) -> bytes:
        self._hit('options')
        return self._reply(200, 'OK', cseq)

    def _req_describe(self, url: str, headers: Dict, cseq: str) -> bytes:
        if not url.startswith('rtsp://'):
            self._hit('describe_not_found')
            return self._reply(404, 'Not Found', cseq)
        self._hit('describe_ok')
        return self._reply(200, 'OK', cseq)

    def _req_setup(self, url: str, headers: Dict, cseq: str) -> bytes:
        if self.state != 'INIT':
            self._hit('setup_invalid')
            return self._reply(455, 'Method Not Valid in This State', cseq)
        self._hit('setup_ok')
        self.state = 'READY'
        self.session = self.SESSION_ID
        return self._reply(200, 'OK', cseq, session=True)

    def _req_play(self, url: str, headers: Dict, cseq: str) -> bytes:
        if self.state == 'READY':
            self._hit('play_ready')
            self.state = 'PLAY'
        elif self.state == 'PLAY':
            self._hit('play_playing')
        elif 'range' in headers:
            # Undocumented: start streaming without a session.
            self._hit('play_shortcut')
            self.state = 'PLAY'
            self.shortcut = True
        else:
            self._hit('play_init')
            return self._reply(455, 'Method Not Valid in This State', cseq)
        return self._reply(200, 'OK', cseq, session=True)

    def _req_pause(self, url: str, headers: Dict, cseq: str) -> bytes:
        if self.state != 'PLAY':
            self._hit('pause_invalid')
            return self._reply(455, 'Method Not Valid in This State', cseq)
        self._hit('pause_ok')
        self.state = 'READY'
        return self._reply(200, 'OK', cseq, session=True)

    def _req_teardown(self, url: str, headers: Dict, cseq: str) -> bytes:
        if self.shortcut:
            # Planted bug: tears down a session that was never set up.
            return self._abort('teardown_crash')
        if self.state == 'INIT':
            self._hit('teardown_no_session')
            return self._reply(454, 'Session Not Found', cseq)
        self._hit('teardown_ok')
        self._reset_session()
        return self._reply(200, 'OK', cseq)


BUILTIN_SERVERS: Dict[str, Type[BenchServer]] = {
    'ftp': FtpLikeServer,
    'rtsp': HiddenTransitionServer,
}


def make_server(name: str) -> BenchServer:
    try:
        return BUILTIN_SERVERS[name]()
    except KeyError:
        raise ValueError(f"unknown builtin server '{name}', choose one of "
                         f"{sorted(BUILTIN_SERVERS)}") from None


def edge_count(name: str) -> int:
    return BUILTIN_SERVERS[name].edge_count()
