#!/usr/bin/env node
// Compiles a standalone TikZ document with the WebAssembly TeX engine shipped
// in node-tikzjax.
//
//   node compile.js input.tex
//   node compile.js --serve
//
// Writes input.log (the TeX log) and, on success, input.svg next to the input.
// Exit codes: 0 success, 1 TeX reported an error, 3 engine aborted, 2 driver failure.
//
// With --serve, each stdin line is a JSON object {"input": "<path to .tex>"} and
// each reply is a stdout line {"exit": <code>} using the codes above. The engine
// is loaded once; every job starts from a fresh copy of the TeX memory image.
'use strict';

const fs = require('fs');
const path = require('path');
const readline = require('readline');

const root = path.dirname(require.resolve('node-tikzjax/package.json'));
const boot = require(path.join(root, 'dist/bootstrap.js'));
const library = require(path.join(root, 'dist/library.js'));
const { dvi2svg } = require(path.join(root, 'dist/dvi2svg.js'));

// TeX reads the clock for the log banner; pin it so logs are reproducible
const epoch = new Date(1000 * Number(process.env.SOURCE_DATE_EPOCH || 946684800));
library.getCurrentMinutes = () => 60 * epoch.getUTCHours() + epoch.getUTCMinutes();
library.getCurrentDay = () => epoch.getUTCDate();
library.getCurrentMonth = () => epoch.getUTCMonth() + 1;
library.getCurrentYear = () => epoch.getUTCFullYear();

const originalLog = console.log;
let current = null;

function writeLog(job, extra) {
  const text = job.texLog || job.consoleLines.join('\n');
  fs.writeFileSync(job.stem + '.log', text + (extra ? '\n' + extra : '') + '\n');
}

const deleteEverything = library.deleteEverything;
library.deleteEverything = () => {
  if (current) {
    try {
      current.texLog = Buffer.from(library.readFileSync('input.log')).toString('utf8');
    } catch (e) {
      // no log written
    }
  }
  deleteEverything();
};

async function compile(input) {
  const job = { stem: input.replace(/\.tex$/, ''), consoleLines: [], texLog: '' };
  current = job;
  let source = fs.readFileSync(input, 'utf8');
  // The preloaded format already carries the standalone class. The engine prepends
  // one line, so dropping the class line with its newline keeps TeX's l.<n> aligned
  // with the original file.
  source = source.replace(/^(\s*)\\documentclass\s*(\[[^\]]*\])?\s*\{[^}]*\}[ \t]*\r?\n?/, '$1');

  console.log = (...args) => job.consoleLines.push(args.join(' '));
  let dvi = null;
  try {
    await boot.load();
    dvi = await boot.tex(source, { showConsole: true });
  } catch (e) {
    job.consoleLines.push(String(e));
  } finally {
    console.log = originalLog;
  }

  if (!dvi || /^! /m.test(job.texLog)) {
    writeLog(job);
    current = null;
    return 1;
  }
  const svg = await dvi2svg(dvi, { disableOptimize: true });
  writeLog(job);
  fs.writeFileSync(job.stem + '.svg', svg);
  current = null;
  return 0;
}

// The engine can stop without settling its promise (e.g. memory exhaustion);
// node then drains the event loop and exits.
function onStall(reply) {
  process.on('beforeExit', () => {
    if (current) {
      writeLog(current, '! TeX engine aborted without producing output.');
      current = null;
      reply(3);
    }
  });
}

function fail(job, e) {
  if (job) {
    writeLog(job, '! driver failure: ' + e);
  }
  return 2;
}

if (process.argv[2] === '--serve') {
  const send = (code) => process.stdout.write(JSON.stringify({ exit: code }) + '\n');
  onStall((code) => {
    send(code);
    process.exit(code);
  });
  const rl = readline.createInterface({ input: process.stdin, terminal: false });
  const queue = [];
  let busy = false;
  const next = async () => {
    if (busy || queue.length === 0) {
      return;
    }
    busy = true;
    const line = queue.shift();
    let code;
    // Let the loop drain while TeX runs so a stalled engine is detected.
    process.stdin.unref();
    try {
      code = await compile(JSON.parse(line).input);
    } catch (e) {
      code = fail(current, e);
      current = null;
    }
    process.stdin.ref();
    send(code);
    busy = false;
    next();
  };
  rl.on('line', (line) => {
    if (line.trim()) {
      queue.push(line);
      next();
    }
  });
} else {
  const input = process.argv[2];
  if (!input) {
    console.error('usage: compile.js <file.tex> | --serve');
    process.exit(2);
  }
  onStall((code) => process.exit(code));
  compile(input)
    .then((code) => process.exit(code))
    .catch((e) => process.exit(fail(current, e)));
}
