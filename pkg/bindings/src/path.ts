/**
 * Client side of one path: a bundle of handshaken TCP streams with
 * striped exchanges, dynamic framing, and the barrier primitive.
 */

import net from 'node:net';

import {
  BARRIER_TOKEN,
  BarrierError,
  DEFAULT_CHUNK_SIZE,
  DEFAULT_DYNAMIC_CAP,
  MAX_STREAMS,
  OversizeFrameError,
  TransportError,
  UsageError,
  decodeFrameLength,
  encodeFrameLength,
  encodeHandshake,
  stripe,
} from './wire.js';

export interface PathOptions {
  chunkSize?: number;
  pacingRate?: number | null; // bytes/s ceiling per stream
  dynamicCap?: number;
  connectTimeoutMs?: number;
}

const READ_BUFFER_HIGH_WATER = 8 * 1024 * 1024;

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

/** Promise-based exact-length reads over a socket, with backpressure. */
class StreamReader {
  private chunks: Buffer[] = [];
  private buffered = 0;
  private waiter: { n: number; resolve: (b: Buffer) => void; reject: (e: Error) => void } | null = null;
  private failure: Error | null = null;
  private ended = false;

  constructor(private socket: net.Socket) {
    socket.on('data', (data: Buffer) => {
      this.chunks.push(data);
      this.buffered += data.length;
      if (this.buffered > READ_BUFFER_HIGH_WATER && !this.waiter) {
        socket.pause();
      }
      this.pump();
    });
    socket.on('end', () => {
      this.ended = true;
      this.pump();
    });
    socket.on('error', (err: Error) => {
      this.failure = err;
      this.pump();
    });
    socket.on('close', () => {
      this.ended = true;
      this.pump();
    });
  }

  readExact(n: number): Promise<Buffer> {
    if (this.waiter) {
      return Promise.reject(
        new UsageError('concurrent reads on one stream are not allowed'),
      );
    }
    return new Promise<Buffer>((resolve, reject) => {
      this.waiter = { n, resolve, reject };
      this.socket.resume();
      this.pump();
    });
  }

  private pump(): void {
    const waiter = this.waiter;
    if (!waiter) {
      return;
    }
    if (this.buffered >= waiter.n) {
      const whole = Buffer.concat(this.chunks, this.buffered);
      const head = whole.subarray(0, waiter.n);
      const rest = whole.subarray(waiter.n);
      this.chunks = rest.length ? [rest] : [];
      this.buffered = rest.length;
      this.waiter = null;
      waiter.resolve(head);
      return;
    }
    if (this.failure) {
      this.waiter = null;
      waiter.reject(new TransportError(`stream failed: ${this.failure.message}`));
      return;
    }
    if (this.ended) {
      this.waiter = null;
      waiter.reject(
        new TransportError(
          `peer closed with ${this.buffered} of ${waiter.n} bytes buffered`,
        ),
      );
    }
  }
}

function writeAll(socket: net.Socket, data: Buffer): Promise<void> {
  return new Promise((resolve, reject) => {
    socket.write(data, (err) => (err ? reject(new TransportError(err.message)) : resolve()));
  });
}

function connectStream(
  host: string,
  port: number,
  handshake: Buffer,
  timeoutMs: number,
): Promise<net.Socket> {
  return new Promise((resolve, reject) => {
    const socket = net.connect({ host, port });
    const timer = setTimeout(() => {
      socket.destroy();
      reject(new TransportError(`connect to ${host}:${port} timed out`));
    }, timeoutMs);
    socket.once('connect', () => {
      clearTimeout(timer);
      socket.setNoDelay(true);
      socket.write(handshake);
      resolve(socket);
    });
    socket.once('error', (err) => {
      clearTimeout(timer);
      reject(new TransportError(`connect to ${host}:${port} failed: ${err.message}`));
    });
  });
}

export class PathClient {
  chunkSize: number;
  pacingRate: number | null;
  dynamicCap: number;
  autotune = false; // the bindings never run the tuning probe
  private sockets: net.Socket[] = [];
  private readers: StreamReader[] = [];
  private closed = false;

  private constructor(opts: PathOptions) {
    this.chunkSize = opts.chunkSize ?? DEFAULT_CHUNK_SIZE;
    this.pacingRate = opts.pacingRate ?? null;
    this.dynamicCap = opts.dynamicCap ?? DEFAULT_DYNAMIC_CAP;
  }

  static async connect(
    host: string,
    port: number,
    streams: number,
    pathId: number,
    opts: PathOptions = {},
  ): Promise<PathClient> {
    if (streams < 1 || streams > MAX_STREAMS) {
      throw new UsageError(`stream count out of range: ${streams}`);
    }
    const path = new PathClient(opts);
    const timeout = opts.connectTimeoutMs ?? 30000;
    try {
      for (let index = 0; index < streams; index++) {
        const socket = await connectStream(
          host, port, encodeHandshake(pathId, index, streams), timeout,
        );
        path.sockets.push(socket);
        path.readers.push(new StreamReader(socket));
      }
    } catch (err) {
      path.destroy();
      throw err;
    }
    return path;
  }

  get streamCount(): number {
    return this.sockets.length;
  }

  get isClosed(): boolean {
    return this.closed;
  }

  destroy(): void {
    this.closed = true;
    for (const socket of this.sockets) {
      socket.destroy();
    }
  }

  private ensureOpen(): void {
    if (this.closed) {
      throw new TransportError('path is closed');
    }
  }

  private async sendSegment(streamIndex: number, segment: Buffer): Promise<void> {
    const socket = this.sockets[streamIndex];
    const start = Date.now();
    let sent = 0;
    while (sent < segment.length) {
      const end = Math.min(sent + this.chunkSize, segment.length);
      await writeAll(socket, segment.subarray(sent, end));
      sent = end;
      if (this.pacingRate) {
        const target = start + (sent / this.pacingRate) * 1000;
        const now = Date.now();
        if (now < target) {
          await sleep(target - now);
        }
      }
    }
  }

  private sendStriped(out: Buffer): Promise<void>[] {
    const lengths = stripe(out.length, this.streamCount);
    const tasks: Promise<void>[] = [];
    let offset = 0;
    lengths.forEach((length, index) => {
      if (length > 0) {
        tasks.push(this.sendSegment(index, out.subarray(offset, offset + length)));
      }
      offset += length;
    });
    return tasks;
  }

  private recvStriped(expected: number): Promise<Buffer> {
    const lengths = stripe(expected, this.streamCount);
    const reads = lengths.map((length, index) =>
      length > 0 ? this.readers[index].readExact(length) : Promise.resolve(Buffer.alloc(0)),
    );
    return Promise.all(reads).then((segments) => Buffer.concat(segments, expected));
  }

  /** Full-duplex fixed-size exchange; both sides must agree on lengths. */
  async sendRecv(out: Buffer, expectedIn: number): Promise<Buffer> {
    this.ensureOpen();
    if (expectedIn < 0) {
      throw new UsageError(`negative receive length: ${expectedIn}`);
    }
    const work = [...this.sendStriped(out), this.recvStriped(expectedIn)] as const;
    const results = await Promise.all(work);
    return results[results.length - 1] as Buffer;
  }

  /** Full-duplex exchange of unknown-size buffers (8-byte length prefix). */
  async dSendRecv(out: Buffer): Promise<Buffer> {
    this.ensureOpen();
    await writeAll(this.sockets[0], encodeFrameLength(out.length));
    const sends = this.sendStriped(out);
    const recv = (async () => {
      const n = decodeFrameLength(await this.readers[0].readExact(8));
      if (n > this.dynamicCap) {
        this.destroy();
        throw new OversizeFrameError(
          `peer advertised ${n} bytes, cap is ${this.dynamicCap}`,
        );
      }
      return this.recvStriped(n);
    })();
    const [received] = await Promise.all([recv, ...sends]);
    return received;
  }

  /** Two-party sync: returns once the peer has entered as well. */
  async barrier(): Promise<void> {
    this.ensureOpen();
    try {
      await writeAll(this.sockets[0], BARRIER_TOKEN);
      const token = await this.readers[0].readExact(BARRIER_TOKEN.length);
      if (!token.equals(BARRIER_TOKEN)) {
        throw new BarrierError(`foreign barrier token ${token.toString('hex')}`);
      }
    } catch (err) {
      this.destroy();
      if (err instanceof BarrierError) {
        throw err;
      }
      throw new BarrierError(`barrier failed: ${(err as Error).message}`);
    }
  }
}
